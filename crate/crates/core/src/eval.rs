//! Accuracy, counter-group, group-robustness, zero-shot and saliency
//! evaluation, plus the JSON / text / CSV report formats.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attributes::{AttributePool, PromptVariant};
use crate::datagen::{Category, GroupedDataset};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math;
use crate::vlm::objective::similarity_pixel_gradient;
use crate::vlm::{ClassPrompt, DualEncoderModel};

/// Cosine cutoff for the counter group. Image-to-attribute cosines of the
/// 64-dim model sit around -0.2 without the attribute and 0.05..0.2 with it.
pub const DEFAULT_SIM_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    /// Accuracy per category name, only for categories present in the split.
    pub per_category: BTreeMap<String, f64>,
    /// `(correct, total)` per category name.
    pub counts: BTreeMap<String, (usize, usize)>,
}

/// Scores predicted category ids against labels.
pub fn score_predictions(predicted: &[usize], labels: &[usize], categories: &[Category]) -> Result<AccuracyReport> {
    if labels.is_empty() {
        return Err(Error::input("cannot evaluate an empty split"));
    }
    if predicted.len() != labels.len() {
        return Err(Error::input("predictions and labels differ in length"));
    }
    let name = |id: usize| -> Result<String> {
        categories
            .iter()
            .find(|c| c.id == id)
            .map(|c| c.name.clone())
            .ok_or_else(|| Error::input(format!("label {id} has no category")))
    };
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (&p, &y) in predicted.iter().zip(labels) {
        let e = counts.entry(name(y)?).or_default();
        e.1 += 1;
        if p == y {
            e.0 += 1;
            correct += 1;
        }
    }
    Ok(AccuracyReport {
        accuracy: correct as f64 / labels.len() as f64,
        per_category: counts.iter().map(|(k, &(c, t))| (k.clone(), c as f64 / t as f64)).collect(),
        counts,
    })
}

/// Predicted category id per image: argmax of the prompt distribution.
pub fn predict_categories(model: &DualEncoderModel, images: &[&Image], prompts: &[ClassPrompt]) -> Result<Vec<usize>> {
    Ok(model
        .predict_indices(images, prompts)?
        .into_iter()
        .map(|i| prompts[i].category_id)
        .collect())
}

/// Accuracy of `model` on the samples at `indices`.
pub fn evaluate_accuracy(
    model: &DualEncoderModel,
    dataset: &GroupedDataset,
    indices: &[usize],
    prompts: &[ClassPrompt],
) -> Result<AccuracyReport> {
    if indices.is_empty() {
        return Err(Error::input("cannot evaluate an empty split"));
    }
    let labels = dataset.labels(indices);
    for l in &labels {
        if !prompts.iter().any(|p| p.category_id == *l) {
            return Err(Error::input(format!("no prompt covers label {l}")));
        }
    }
    let predicted = predict_categories(model, &dataset.images(indices), prompts)?;
    score_predictions(&predicted, &labels, &dataset.categories)
}

/// Positions whose similarity to a spurious attribute stays below `threshold`.
/// `None` means the image's category has no spurious attribute.
pub fn filter_by_similarity(max_sims: &[Option<f64>], threshold: f64) -> Vec<usize> {
    max_sims
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_none_or(|s| s < threshold))
        .map(|(i, _)| i)
        .collect()
}

/// Highest cosine between each image and its category's spurious attributes.
pub fn spurious_similarities(
    model: &DualEncoderModel,
    dataset: &GroupedDataset,
    indices: &[usize],
    pool: &AttributePool,
) -> Result<Vec<Option<f64>>> {
    let mut phrase_cache: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for c in &dataset.categories {
        let emb = pool
            .spurious(&c.name)
            .iter()
            .map(|a| model.encode_phrase(&a.text))
            .collect::<Result<Vec<_>>>()?;
        phrase_cache.insert(c.id, emb);
    }
    indices
        .iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            let phrases = phrase_cache.get(&s.label).map(Vec::as_slice).unwrap_or(&[]);
            if phrases.is_empty() {
                return Ok(None);
            }
            let e = model.encode_image(&s.image)?;
            Ok(phrases.iter().map(|p| math::dot(&e, p)).reduce(f64::max))
        })
        .collect()
}

/// Test samples free of their category's flagged attributes: an image is
/// dropped when its cosine to any of them reaches `threshold`.
pub fn extract_counter_group(
    model: &DualEncoderModel,
    dataset: &GroupedDataset,
    indices: &[usize],
    pool: &AttributePool,
    threshold: f64,
) -> Result<Vec<usize>> {
    let sims = spurious_similarities(model, dataset, indices, pool)?;
    Ok(filter_by_similarity(&sims, threshold).into_iter().map(|k| indices[k]).collect())
}

/// Samples whose planted attributes are all absent, per generator ground truth.
pub fn ground_truth_counter_group(dataset: &GroupedDataset, indices: &[usize]) -> Vec<usize> {
    indices
        .iter()
        .copied()
        .filter(|&i| dataset.samples[i].planted.iter().all(|p| !p))
        .collect()
}

pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: std::collections::BTreeSet<_> = a.iter().collect();
    let b: std::collections::BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(&b).count() as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub worst: f64,
    pub avg: f64,
    pub gap: f64,
    /// `(correct, total)` per populated group id.
    pub per_group: BTreeMap<usize, (usize, usize)>,
}

/// Worst-group and unweighted average-group accuracy. Group ids below
/// `num_groups` that have no samples are skipped with a warning.
pub fn group_metrics(predicted: &[usize], labels: &[usize], groups: &[usize], num_groups: usize) -> Result<GroupMetrics> {
    if predicted.len() != labels.len() || labels.len() != groups.len() {
        return Err(Error::input("predictions, labels and groups differ in length"));
    }
    if labels.is_empty() {
        return Err(Error::input("cannot compute group metrics without samples"));
    }
    let mut per_group: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for ((&p, &y), &g) in predicted.iter().zip(labels).zip(groups) {
        let e = per_group.entry(g).or_default();
        e.1 += 1;
        if p == y {
            e.0 += 1;
        }
    }
    let empty = (0..num_groups).filter(|g| !per_group.contains_key(g)).count();
    if empty > 0 {
        log::warn!("{empty} of {num_groups} groups have no samples and are excluded");
    }
    let accs: Vec<f64> = per_group.values().map(|&(c, t)| c as f64 / t as f64).collect();
    Ok(metrics_from_accuracies(&accs, per_group))
}

fn metrics_from_accuracies(accs: &[f64], per_group: BTreeMap<usize, (usize, usize)>) -> GroupMetrics {
    let worst = accs.iter().copied().fold(f64::INFINITY, f64::min);
    let avg = accs.iter().sum::<f64>() / accs.len() as f64;
    GroupMetrics {
        worst,
        avg,
        gap: avg - worst,
        per_group,
    }
}

/// Same metrics from precomputed per-group accuracies.
pub fn group_metrics_from_accuracies(accs: &[f64]) -> Result<GroupMetrics> {
    if accs.is_empty() {
        return Err(Error::input("no groups"));
    }
    Ok(metrics_from_accuracies(accs, BTreeMap::new()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    /// Prompts with every attribute.
    pub full: f64,
    /// Prompts with the flagged attributes removed.
    pub filtered: f64,
}

/// Accuracy of an unadapted model with prompts from the full pool and from the
/// pool minus its spurious attributes.
pub fn zero_shot_eval(model: &DualEncoderModel, dataset: &GroupedDataset, indices: &[usize], pool: &AttributePool) -> Result<ZeroShotResult> {
    let full = pool.prompts(&dataset.categories, PromptVariant::Full)?;
    let filtered = pool.prompts(&dataset.categories, PromptVariant::Filtered)?;
    Ok(ZeroShotResult {
        full: evaluate_accuracy(model, dataset, indices, &full)?.accuracy,
        filtered: evaluate_accuracy(model, dataset, indices, &filtered)?.accuracy,
    })
}

/// Normalized `|∂ cos(image, prompt) / ∂ pixel|`, summed over channels, as an
/// `H·W` row-major map. Falls back to uniform when the gradient vanishes.
pub fn saliency_map(model: &DualEncoderModel, image: &Image, prompt: &ClassPrompt) -> Result<Vec<f64>> {
    let grad = similarity_pixel_gradient(model, image, prompt)?;
    Ok(saliency_from_gradient(&grad, image.height() * image.width()))
}

/// Channel-summed absolute CHW gradient normalized to sum 1.
pub fn saliency_from_gradient(grad_chw: &[f64], plane: usize) -> Vec<f64> {
    let mut map = vec![0.0; plane];
    for ch in grad_chw.chunks(plane) {
        for (m, g) in map.iter_mut().zip(ch) {
            *m += g.abs();
        }
    }
    let total: f64 = map.iter().sum();
    if total > 0.0 && total.is_finite() {
        map.iter_mut().for_each(|m| *m /= total);
    } else {
        map.iter_mut().for_each(|m| *m = 1.0 / plane as f64);
    }
    map
}

/// Saliency mass outside the object mask.
pub fn background_mass(map: &[f64], object_mask: &[bool]) -> f64 {
    map.iter().zip(object_mask).filter(|(_, &o)| !o).map(|(m, _)| m).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterSummary {
    pub accuracy: Option<f64>,
    pub size: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub worst: f64,
    pub avg: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub accuracy: f64,
    pub per_category: BTreeMap<String, f64>,
    pub counter: CounterSummary,
    pub groups: GroupSummary,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::input(format!("cannot serialize report: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "run `eval` first".into(),
            },
            _ => Error::io(path, e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Flat `(metric, value)` pairs in a fixed order.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut out = vec![("accuracy".to_string(), self.accuracy)];
        if let Some(a) = self.counter.accuracy {
            out.push(("counter_accuracy".into(), a));
        }
        out.push(("worst_group".into(), self.groups.worst));
        out.push(("avg_group".into(), self.groups.avg));
        out.push(("gap".into(), self.groups.gap));
        out.extend(self.per_category.iter().map(|(k, v)| (format!("category:{k}"), *v)));
        out
    }
}

/// Counter group of a split, extracted once with a fixed reference model so
/// that every evaluated model is scored on the same samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterGroup {
    pub indices: Vec<usize>,
    pub threshold: f64,
}

impl CounterGroup {
    pub fn extract(reference: &DualEncoderModel, dataset: &GroupedDataset, indices: &[usize], pool: &AttributePool, threshold: f64) -> Result<Self> {
        Ok(Self {
            indices: extract_counter_group(reference, dataset, indices, pool, threshold)?,
            threshold,
        })
    }
}

/// Full evaluation of one model on a split: accuracy, counter group and groups.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_split(
    model: &DualEncoderModel,
    dataset: &GroupedDataset,
    indices: &[usize],
    prompts: &[ClassPrompt],
    counter: &CounterGroup,
    split: &str,
    seed: u64,
    config_hash: &str,
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::input(format!("split '{split}' is empty")));
    }
    let labels = dataset.labels(indices);
    let predicted = predict_categories(model, &dataset.images(indices), prompts)?;
    let acc = score_predictions(&predicted, &labels, &dataset.categories)?;
    let keep: Vec<usize> = indices
        .iter()
        .enumerate()
        .filter(|(_, i)| counter.indices.contains(i))
        .map(|(k, _)| k)
        .collect();
    let counter_acc = (!keep.is_empty()).then(|| {
        keep.iter().filter(|&&k| predicted[k] == labels[k]).count() as f64 / keep.len() as f64
    });
    let groups = group_metrics(&predicted, &labels, &dataset.groups(indices), dataset.num_groups())?;
    Ok(EvalReport {
        split: split.to_string(),
        accuracy: acc.accuracy,
        per_category: acc.per_category,
        counter: CounterSummary {
            accuracy: counter_acc,
            size: keep.len(),
            threshold: counter.threshold,
        },
        groups: GroupSummary {
            worst: groups.worst,
            avg: groups.avg,
            gap: groups.gap,
        },
        seed,
        config_hash: config_hash.to_string(),
    })
}

/// Aligned text table: one row per metric, one column per labeled report, and
/// a delta column (last minus first) when there are two or more reports.
pub fn render_table(reports: &[(String, EvalReport)]) -> String {
    let mut metrics: Vec<String> = Vec::new();
    for (_, r) in reports {
        for (m, _) in r.metrics() {
            if !metrics.contains(&m) {
                metrics.push(m);
            }
        }
    }
    let mut header = vec!["metric".to_string()];
    header.extend(reports.iter().map(|(l, _)| l.clone()));
    if reports.len() >= 2 {
        header.push("delta".into());
    }
    let mut rows = vec![header];
    for m in &metrics {
        let vals: Vec<Option<f64>> = reports
            .iter()
            .map(|(_, r)| r.metrics().into_iter().find(|(k, _)| k == m).map(|(_, v)| v))
            .collect();
        let mut row = vec![m.clone()];
        row.extend(vals.iter().map(|v| v.map_or("-".into(), |v| format!("{v:.4}"))));
        if reports.len() >= 2 {
            row.push(match (vals[0], vals[vals.len() - 1]) {
                (Some(a), Some(b)) => format!("{:+.4}", b - a),
                _ => "-".into(),
            });
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, &w))| if i == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

/// CSV with one `method,metric,value` row per metric of each report.
pub fn render_csv(reports: &[(String, EvalReport)]) -> String {
    let mut out = String::from("method,metric,value\n");
    for (label, r) in reports {
        for (m, v) in r.metrics() {
            let _ = writeln!(out, "{},{},{}", csv_field(label), csv_field(&m), v);
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{categories_for, GeneratorKind};

    fn cats() -> Vec<Category> {
        categories_for(GeneratorKind::ColoredMnist, 3)
    }

    #[test]
    fn oracle_predictor_scores_one() {
        let labels = vec![0, 1, 2, 2, 1];
        let r = score_predictions(&labels, &labels, &cats()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.per_category.values().all(|&a| a == 1.0));
    }

    #[test]
    fn empty_split_is_input_error() {
        assert!(matches!(score_predictions(&[], &[], &cats()), Err(Error::Input(_))));
    }

    #[test]
    fn hand_filter_keeps_low_similarity() {
        assert_eq!(filter_by_similarity(&[Some(0.8), Some(0.3)], 0.5), vec![1]);
        assert_eq!(filter_by_similarity(&[None, None], 0.5), vec![0, 1]);
    }

    #[test]
    fn hand_group_metrics() {
        let m = group_metrics_from_accuracies(&[0.9, 0.5, 0.7]).unwrap();
        assert!((m.worst - 0.5).abs() < 1e-12);
        assert!((m.avg - 0.7).abs() < 1e-12);
        assert!((m.gap - 0.2).abs() < 1e-12);
    }

    #[test]
    fn saliency_fallback_is_uniform() {
        let m = saliency_from_gradient(&[0.0; 12], 4);
        assert_eq!(m, vec![0.25; 4]);
    }

    #[test]
    fn table_shows_delta() {
        let r = |a: f64| EvalReport {
            split: "test".into(),
            accuracy: a,
            per_category: BTreeMap::new(),
            counter: CounterSummary { accuracy: None, size: 0, threshold: 0.5 },
            groups: GroupSummary { worst: a, avg: a, gap: 0.0 },
            seed: 0,
            config_hash: "x".into(),
        };
        let t = render_table(&[("a".into(), r(0.5)), ("b".into(), r(0.75))]);
        assert!(t.contains("+0.2500"), "{t}");
    }
}
