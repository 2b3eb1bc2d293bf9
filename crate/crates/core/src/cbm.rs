//! Concept-bottleneck probe: images are scored against every attribute
//! embedding in the pool and a linear head maps those scores to categories.
//! The head's per-category weights tell which attributes drive predictions.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attributes::{Attribute, AttributeKind, AttributePool};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::{dot, log_sum_exp, mean};
use crate::vlm::DualEncoderModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Fixed,
    #[default]
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdPolicy {
    pub mode: ThresholdMode,
    /// Threshold in fixed mode; fallback in adaptive mode when a category has
    /// no core attributes.
    pub gamma: f64,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        Self {
            mode: ThresholdMode::Adaptive,
            gamma: 0.4,
        }
    }
}

impl ThresholdPolicy {
    pub fn fixed(gamma: f64) -> Self {
        Self {
            mode: ThresholdMode::Fixed,
            gamma,
        }
    }

    pub fn adaptive() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CbmConfig {
    /// Gradient-descent step; `None` picks the inverse of a smoothness bound.
    pub learning_rate: Option<f64>,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Fit on per-concept z-scored scores, so that head weights measure
    /// influence per standard deviation of each concept score.
    pub standardize: bool,
    /// Ridge penalty `l2/2 · ‖W‖²` on the head.
    pub l2: f64,
}

impl Default for CbmConfig {
    fn default() -> Self {
        Self {
            learning_rate: None,
            max_iterations: 3000,
            tolerance: 1e-5,
            standardize: true,
            l2: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbmProbe {
    /// Attribute embeddings, one unit-norm row per pool attribute.
    pub bottleneck: Vec<Vec<f64>>,
    /// Row of `bottleneck` → (category position, attribute position).
    pub index: Vec<(usize, usize)>,
    /// Rows owned by each category.
    pub ranges: Vec<Range<usize>>,
    pub categories: Vec<String>,
    /// `|C| × N`, zero until fitted.
    pub head: Vec<Vec<f64>>,
    /// Per-concept (mean, std) applied to scores before the head, if fitted
    /// with standardization.
    pub scaling: Option<Vec<(f64, f64)>>,
}

pub fn build_bottleneck(pool: &AttributePool, model: &DualEncoderModel) -> Result<CbmProbe> {
    if pool.total_attributes() == 0 {
        return Err(Error::input("attribute pool is empty"));
    }
    let mut bottleneck = Vec::with_capacity(pool.total_attributes());
    let mut index = Vec::new();
    let mut ranges = Vec::new();
    for (c, entry) in pool.entries().iter().enumerate() {
        let start = bottleneck.len();
        for (j, a) in entry.attributes.iter().enumerate() {
            bottleneck.push(model.encode_phrase(&a.text)?);
            index.push((c, j));
        }
        ranges.push(start..bottleneck.len());
    }
    let n = bottleneck.len();
    Ok(CbmProbe {
        bottleneck,
        index,
        ranges,
        categories: pool.entries().iter().map(|e| e.category.clone()).collect(),
        head: vec![vec![0.0; n]; pool.len()],
        scaling: None,
    })
}

impl CbmProbe {
    pub fn num_concepts(&self) -> usize {
        self.bottleneck.len()
    }

    pub fn row(&self, category: usize, attribute: usize) -> usize {
        self.ranges[category].start + attribute
    }

    pub fn concept_scores(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        let d = self.bottleneck[0].len();
        if embedding.len() != d {
            return Err(Error::input(format!("embedding has dimension {}, bottleneck {d}", embedding.len())));
        }
        Ok(self.bottleneck.iter().map(|e| dot(embedding, e)).collect())
    }

    /// Scores as seen by the head.
    pub fn head_inputs(&self, scores: &[f64]) -> Vec<f64> {
        match &self.scaling {
            Some(sc) => scores.iter().zip(sc).map(|(g, &(m, s))| standardize(*g, m, s)).collect(),
            None => scores.to_vec(),
        }
    }

    pub fn logits(&self, scores: &[f64]) -> Vec<f64> {
        let x = self.head_inputs(scores);
        self.head.iter().map(|w| dot(w, &x)).collect()
    }

    pub fn predict(&self, scores: &[f64]) -> usize {
        crate::math::argmax(&self.logits(scores))
    }

    /// Normalized weights of category `c` over its own attributes.
    pub fn category_weights(&self, c: usize) -> Vec<f64> {
        normalize_weights(&self.head[c][self.ranges[c].clone()])
    }
}

fn standardize(g: f64, mean: f64, std: f64) -> f64 {
    if std > 0.0 {
        (g - mean) / std
    } else {
        0.0
    }
}

fn column_stats(scores: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let n = scores[0].len();
    let m = scores.len() as f64;
    (0..n)
        .map(|j| {
            let mean = scores.iter().map(|g| g[j]).sum::<f64>() / m;
            let var = scores.iter().map(|g| (g[j] - mean).powi(2)).sum::<f64>() / m;
            (mean, if var > 1e-24 { var.sqrt() } else { 0.0 })
        })
        .collect()
}

/// Fits the head by full-batch gradient descent on the softmax cross-entropy
/// from a zero start. Returns the number of iterations run.
pub fn fit_head(probe: &mut CbmProbe, scores: &[Vec<f64>], targets: &[usize], cfg: &CbmConfig) -> Result<usize> {
    let k = probe.head.len();
    let n = probe.num_concepts();
    if scores.len() != targets.len() || scores.is_empty() {
        return Err(Error::input("probe fit needs one target per score vector"));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::input(format!("target {bad} outside {k} categories")));
    }
    for c in 0..k {
        if !targets.contains(&c) {
            log::warn!("category '{}' has no training samples; its probe row stays zero", probe.categories[c]);
        }
    }
    probe.scaling = cfg.standardize.then(|| column_stats(scores));
    let inputs: Vec<Vec<f64>> = scores.iter().map(|g| probe.head_inputs(g)).collect();
    let scores = &inputs;
    let m = scores.len() as f64;
    let lr = match cfg.learning_rate {
        Some(lr) => lr,
        None => {
            let max_sq = scores.iter().map(|g| dot(g, g)).fold(0.0, f64::max);
            if max_sq == 0.0 {
                return Ok(0);
            }
            // Inverse of a bound on the loss curvature.
            1.0 / (0.5 * max_sq + cfg.l2)
        }
    };
    for c in probe.head.iter_mut() {
        c.iter_mut().for_each(|w| *w = 0.0);
    }
    let present: Vec<bool> = (0..k).map(|c| targets.contains(&c)).collect();
    let mut grad = vec![vec![0.0; n]; k];
    for it in 0..cfg.max_iterations {
        grad.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x = 0.0));
        for (g, &y) in scores.iter().zip(targets) {
            let logits: Vec<f64> = probe.head.iter().map(|w| dot(w, g)).collect();
            let lse = log_sum_exp(&logits);
            for c in 0..k {
                let p = (logits[c] - lse).exp() - if c == y { 1.0 } else { 0.0 };
                if p != 0.0 {
                    crate::math::axpy(&mut grad[c], p / m, g);
                }
            }
        }
        for c in 0..k {
            if !present[c] {
                grad[c].iter_mut().for_each(|x| *x = 0.0);
            } else if cfg.l2 > 0.0 {
                crate::math::axpy(&mut grad[c], cfg.l2, &probe.head[c]);
            }
        }
        let gnorm = grad.iter().map(|g| dot(g, g)).sum::<f64>().sqrt();
        if gnorm < cfg.tolerance {
            return Ok(it);
        }
        for (w, g) in probe.head.iter_mut().zip(&grad) {
            crate::math::axpy(w, -lr, g);
        }
    }
    Ok(cfg.max_iterations)
}

/// Concept scores of every image under the model.
pub fn score_images(probe: &CbmProbe, model: &DualEncoderModel, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|img| probe.concept_scores(&model.encode_image(img)?))
        .collect()
}

pub fn fit_cbm(probe: &mut CbmProbe, model: &DualEncoderModel, images: &[&Image], targets: &[usize], cfg: &CbmConfig) -> Result<usize> {
    let scores = score_images(probe, model, images)?;
    fit_head(probe, &scores, targets, cfg)
}

/// Clamps to non-negative and rescales to sum 1; uniform when nothing is positive.
pub fn normalize_weights(raw: &[f64]) -> Vec<f64> {
    if raw.is_empty() {
        return Vec::new();
    }
    let clamped: Vec<f64> = raw.iter().map(|w| w.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if total > 0.0 {
        clamped.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / raw.len() as f64; raw.len()]
    }
}

/// Threshold actually applied to a category.
///
/// Adaptive mode uses the weakest core weight. When there is no core
/// attribute, or the weakest one carries no weight at all, that threshold
/// would flag every non-core attribute, so the fixed gamma is used instead.
pub fn effective_gamma(attributes: &[Attribute], weights: &[f64], policy: &ThresholdPolicy) -> f64 {
    match policy.mode {
        ThresholdMode::Fixed => policy.gamma,
        ThresholdMode::Adaptive => attributes
            .iter()
            .zip(weights)
            .filter(|(a, _)| a.kind == AttributeKind::Core)
            .map(|(_, &w)| w)
            .reduce(f64::min)
            .filter(|&w| w > 0.0)
            .unwrap_or(policy.gamma),
    }
}

/// Positions of non-core attributes whose weight reaches the threshold.
pub fn select_spurious(attributes: &[Attribute], weights: &[f64], policy: &ThresholdPolicy) -> Vec<usize> {
    let gamma = effective_gamma(attributes, weights, policy);
    attributes
        .iter()
        .zip(weights)
        .enumerate()
        .filter(|(_, (a, &w))| a.kind != AttributeKind::Core && w >= gamma)
        .map(|(i, _)| i)
        .collect()
}

/// Mean weight of the spurious attributes over the mean of all; 0 if none.
pub fn compute_scr(weights: &[f64], spurious: &[usize]) -> f64 {
    if spurious.is_empty() || weights.is_empty() {
        return 0.0;
    }
    let overall = mean(weights);
    if overall == 0.0 {
        return 0.0;
    }
    let s: Vec<f64> = spurious.iter().map(|&i| weights[i]).collect();
    mean(&s) / overall
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryVerdict {
    pub category: String,
    pub gamma: f64,
    pub scr: f64,
    pub spurious: Vec<String>,
}

/// Fills weights into a copy of the pool and flags spurious attributes.
/// Previously flagged attributes are reset to non-core first.
pub fn annotate_pool(probe: &CbmProbe, pool: &AttributePool, policy: &ThresholdPolicy) -> Result<(AttributePool, Vec<CategoryVerdict>)> {
    policy.validate()?;
    if pool.len() != probe.categories.len() {
        return Err(Error::input("pool and probe disagree on categories"));
    }
    let mut out = pool.clone();
    let mut verdicts = Vec::with_capacity(pool.len());
    for (c, name) in probe.categories.iter().enumerate() {
        let attrs = out.get_mut(name).ok_or_else(|| Error::input(format!("category '{name}' missing from pool")))?;
        if attrs.len() != probe.ranges[c].len() {
            return Err(Error::input(format!("category '{name}' changed since the probe was built")));
        }
        for a in attrs.iter_mut() {
            if a.kind == AttributeKind::Spurious {
                a.kind = AttributeKind::NonCore;
            }
        }
        let weights = probe.category_weights(c);
        let chosen = select_spurious(attrs, &weights, policy);
        let gamma = effective_gamma(attrs, &weights, policy);
        for (a, &w) in attrs.iter_mut().zip(&weights) {
            a.weight = Some(w);
        }
        for &i in &chosen {
            attrs[i].mark_spurious()?;
        }
        verdicts.push(CategoryVerdict {
            category: name.clone(),
            gamma,
            scr: compute_scr(&weights, &chosen),
            spurious: chosen.iter().map(|&i| attrs[i].text.clone()).collect(),
        });
    }
    Ok((out, verdicts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attributes::AttributeOrigin;

    fn attrs(kinds: &[AttributeKind]) -> Vec<Attribute> {
        kinds
            .iter()
            .enumerate()
            .map(|(i, &k)| Attribute::new(format!("a{i}"), k, AttributeOrigin::Manual).unwrap())
            .collect()
    }

    #[test]
    fn normalization() {
        let w = normalize_weights(&[2.0, -1.0, 1.0]);
        assert!((w[0] - 0.6667).abs() < 1e-4 && w[1] == 0.0 && (w[2] - 0.3333).abs() < 1e-4);
        assert_eq!(normalize_weights(&[-1.0, -2.0, -0.5]), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn selection_rules() {
        use AttributeKind::*;
        let a = attrs(&[NonCore, NonCore, Core, Core]);
        let w = [0.9, 0.4, 0.5, 0.3];
        assert_eq!(select_spurious(&a, &w, &ThresholdPolicy::adaptive()), vec![0, 1]);
        assert_eq!(select_spurious(&a, &w, &ThresholdPolicy::fixed(0.6)), vec![0]);
        let none = attrs(&[Core, Core]);
        assert!(select_spurious(&none, &[0.5, 0.5], &ThresholdPolicy::adaptive()).is_empty());
        let no_core = attrs(&[NonCore, NonCore]);
        assert_eq!(select_spurious(&no_core, &[0.7, 0.3], &ThresholdPolicy::adaptive()), vec![0]);
        let tie = attrs(&[NonCore, Core]);
        assert_eq!(select_spurious(&tie, &[0.5, 0.5], &ThresholdPolicy::adaptive()), vec![0]);
    }

    #[test]
    fn scr_values() {
        assert!((compute_scr(&[0.8, 0.6, 0.2, 0.4], &[0, 1]) - 1.4).abs() < 1e-12);
        assert!((compute_scr(&[0.3, 0.7], &[0, 1]) - 1.0).abs() < 1e-12);
        assert_eq!(compute_scr(&[0.3, 0.7], &[]), 0.0);
    }

    #[test]
    fn zero_scores_leave_head_at_zero() {
        let mut probe = CbmProbe {
            bottleneck: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            index: vec![(0, 0), (1, 0)],
            ranges: vec![0..1, 1..2],
            categories: vec!["a".into(), "b".into()],
            head: vec![vec![0.0; 2]; 2],
            scaling: None,
        };
        fit_head(&mut probe, &[vec![0.0, 0.0], vec![0.0, 0.0]], &[0, 1], &CbmConfig::default()).unwrap();
        assert!(probe.head.iter().flatten().all(|&w| w == 0.0));
        let s = probe.concept_scores(&[0.0, 1.0]).unwrap();
        assert_eq!(s, vec![0.0, 1.0]);
        assert!(probe.concept_scores(&[1.0]).is_err());
    }
}
