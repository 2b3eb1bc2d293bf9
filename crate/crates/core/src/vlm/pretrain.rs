use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::params::{ModelParams, PARAM_NAMES};
use super::tower;
use super::DualEncoderModel;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math;
use crate::seed::{derive_seed, rng_from};

/// An image with its caption, as produced by the corpus generators.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionedImage {
    pub image: Image,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            epochs: 3,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub loss_trace: Vec<f64>,
}

/// Tensors trained during the contrastive warm-up: both towers, never the
/// adaptation parameters.
const TOWER_PARAMS: &[&str] = &[
    PARAM_NAMES[0],
    PARAM_NAMES[1],
    PARAM_NAMES[2],
    PARAM_NAMES[3],
    PARAM_NAMES[4],
    PARAM_NAMES[5],
    PARAM_NAMES[6],
    PARAM_NAMES[7],
    PARAM_NAMES[8],
];

struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl Adam {
    fn new(p: &ModelParams) -> Self {
        Self {
            m: p.zeros_like(),
            v: p.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, names: &[&str]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for &name in names {
            let g = &grads.get(name).expect("layout").data;
            let m = &mut self.m.get_mut(name).expect("layout").data;
            let v = &mut self.v.get_mut(name).expect("layout").data;
            let p = &mut params.get_mut(name).expect("layout").data;
            for i in 0..p.len() {
                m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
            }
        }
    }
}

/// Symmetric image-text contrastive loss for one batch. Identical captions
/// inside a batch are merged, and the caption-to-image direction spreads its
/// target uniformly over every image carrying that caption.
pub fn contrastive_batch_loss(
    model: &DualEncoderModel,
    batch: &[&CaptionedImage],
    grads: Option<&mut ModelParams>,
) -> Result<f64> {
    let tau = model.temperature();
    let shape = model.config.trunk_shape();
    let mut caption_ids: BTreeMap<&str, usize> = BTreeMap::new();
    let mut captions: Vec<&str> = Vec::new();
    let mut owner = Vec::with_capacity(batch.len());
    for item in batch {
        let next = captions.len();
        let id = *caption_ids.entry(item.caption.as_str()).or_insert(next);
        if id == next {
            captions.push(&item.caption);
        }
        owner.push(id);
    }
    let texts: Vec<_> = captions
        .iter()
        .map(|c| {
            let toks = model.vocab.encode(c)?;
            Ok(tower::text_forward(&model.params, model.embed_dim(), &toks, None))
        })
        .collect::<Result<_>>()?;
    let imgs: Vec<_> = batch
        .iter()
        .map(|item| {
            model.check_image(&item.image)?;
            let acts = tower::trunk_forward(shape, &model.params, item.image.to_chw());
            let head = tower::head_forward(&model.params, &acts.z);
            Ok((acts, head))
        })
        .collect::<Result<_>>()?;

    let (b, u) = (imgs.len(), texts.len());
    let logits: Vec<Vec<f64>> = imgs
        .iter()
        .map(|(_, h)| texts.iter().map(|t| math::dot(&h.out, &t.out) / tau).collect())
        .collect();
    let mut dlogits = vec![vec![0.0; u]; b];
    let mut loss = 0.0;
    for i in 0..b {
        let lse = math::log_sum_exp(&logits[i]);
        loss += 0.5 * (lse - logits[i][owner[i]]) / b as f64;
        for j in 0..u {
            let target = if owner[i] == j { 1.0 } else { 0.0 };
            dlogits[i][j] += 0.5 * ((logits[i][j] - lse).exp() - target) / b as f64;
        }
    }
    for j in 0..u {
        let column: Vec<f64> = (0..b).map(|i| logits[i][j]).collect();
        let lse = math::log_sum_exp(&column);
        let members = owner.iter().filter(|&&o| o == j).count() as f64;
        let mut target_mean = 0.0;
        for i in 0..b {
            let target = if owner[i] == j { 1.0 / members } else { 0.0 };
            target_mean += target * column[i];
            dlogits[i][j] += 0.5 * ((column[i] - lse).exp() - target) / u as f64;
        }
        loss += 0.5 * (lse - target_mean) / u as f64;
    }

    if let Some(g) = grads {
        let d = model.embed_dim();
        let mut dtexts = vec![vec![0.0; d]; u];
        for (i, (acts, head)) in imgs.iter().enumerate() {
            let mut dout = vec![0.0; d];
            for j in 0..u {
                let dl = dlogits[i][j] / tau;
                math::axpy(&mut dout, dl, &texts[j].out);
                math::axpy(&mut dtexts[j], dl, &head.out);
            }
            let dz = tower::head_backward(&model.params, &acts.z, head, &dout, g);
            tower::trunk_backward(shape, &model.params, acts, &dz, g, false);
        }
        for (acts, dt) in texts.iter().zip(&dtexts) {
            tower::text_backward(&model.params, acts, dt, g);
        }
    }
    Ok(loss)
}

/// Contrastive warm-up of both towers with Adam. Parameters are rounded to
/// `f32` at the end so that checkpoints reload bit-exactly.
pub fn pretrain(model: &mut DualEncoderModel, corpus: &[CaptionedImage], cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    if cfg.batch_size < 2 {
        return Err(Error::config("pretraining batch_size must be at least 2"));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::config("pretraining learning_rate must be positive"));
    }
    if corpus.is_empty() && cfg.epochs > 0 {
        return Err(Error::input("pretraining corpus is empty"));
    }
    let mut adam = Adam::new(&model.params);
    let mut rng = rng_from(derive_seed(cfg.seed, "pretrain-shuffle"));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        // cosine decay keeps the last epochs from bouncing around
        let lr = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos());
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&CaptionedImage> = chunk.iter().map(|&i| &corpus[i]).collect();
            let mut grads = model.params.zeros_like();
            let l = contrastive_batch_loss(model, &batch, Some(&mut grads))?;
            adam.step(&mut model.params, &grads, lr, TOWER_PARAMS);
            total += l * chunk.len() as f64;
            count += chunk.len();
        }
        trace.push(total / count.max(1) as f64);
        log::debug!("pretrain epoch {epoch}: loss {:.4}", trace.last().unwrap());
    }
    model.params.round_to_f32();
    Ok(PretrainOutcome { loss_trace: trace })
}
