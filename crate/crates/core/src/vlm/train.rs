use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::objective::{prompt_cross_entropy, ImageInput};
use super::{AdaptationMode, ClassPrompt, DualEncoderModel};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed::{derive_seed, rng_from};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 120,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Labeled images for the main classification task.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet<'a> {
    pub images: Vec<&'a Image>,
    pub labels: Vec<usize>,
}

impl<'a> TrainingSet<'a> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// One category's auxiliary task: its real prompt plus pseudo prompts, and the
/// samples to classify among them.
#[derive(Debug, Clone)]
pub struct SubsidiaryGroup<'a> {
    /// Label set for this category; index 0 is the real category.
    pub prompts: Vec<ClassPrompt>,
    pub images: Vec<&'a Image>,
    /// Index into `prompts` for each image.
    pub targets: Vec<usize>,
}

/// The auxiliary objective optimized alongside the main loss with weight `lambda`.
#[derive(Debug, Clone)]
pub struct SubsidiaryTask<'a> {
    pub lambda: f64,
    pub groups: Vec<SubsidiaryGroup<'a>>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: DualEncoderModel,
    /// Mean main cross-entropy per epoch.
    pub loss_trace: Vec<f64>,
    /// Per-epoch estimate of the subsidiary loss (empty without a subsidiary task).
    pub subsidiary_trace: Vec<f64>,
}

enum Inputs<'a> {
    Cached(Vec<Vec<f64>>),
    Pixels(Vec<&'a Image>),
}

impl<'a> Inputs<'a> {
    fn new(model: &DualEncoderModel, images: &[&'a Image]) -> Result<Self> {
        match model.config.adaptation {
            AdaptationMode::Peft => Ok(Inputs::Cached(
                images
                    .iter()
                    .map(|im| model.image_features(im))
                    .collect::<Result<_>>()?,
            )),
            AdaptationMode::Full => {
                for im in images {
                    model.check_image(im)?;
                }
                Ok(Inputs::Pixels(images.to_vec()))
            }
        }
    }

    fn get(&self, i: usize) -> ImageInput<'_> {
        match self {
            Inputs::Cached(f) => ImageInput::Features(&f[i]),
            Inputs::Pixels(p) => ImageInput::Pixels(p[i]),
        }
    }
}

/// Fine-tunes the adaptation parameters with SGD on the main cross-entropy,
/// optionally adding `lambda` times the subsidiary loss (one subsidiary batch
/// per main batch).
pub fn fit_main(
    model: &DualEncoderModel,
    data: &TrainingSet<'_>,
    prompts: &[ClassPrompt],
    cfg: &TrainConfig,
    subsidiary: Option<&SubsidiaryTask<'_>>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if data.images.len() != data.labels.len() {
        return Err(Error::input("images and labels differ in length"));
    }
    let slot: HashMap<usize, usize> = prompts.iter().enumerate().map(|(i, p)| (p.category_id, i)).collect();
    let targets: Vec<usize> = data
        .labels
        .iter()
        .map(|l| {
            slot.get(l)
                .copied()
                .ok_or_else(|| Error::config(format!("label {l} has no prompt")))
        })
        .collect::<Result<_>>()?;
    if let Some(task) = subsidiary {
        if task.lambda < 0.0 {
            return Err(Error::config("lambda must be non-negative"));
        }
        for g in &task.groups {
            if g.prompts.is_empty() || g.images.len() != g.targets.len() {
                return Err(Error::config("malformed subsidiary group"));
            }
        }
    }

    let mut model = model.clone();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let mut subsidiary_trace = Vec::new();
    if cfg.epochs == 0 || data.is_empty() {
        return Ok(FitOutcome {
            model,
            loss_trace,
            subsidiary_trace,
        });
    }

    let trainable = model.config.adaptation.trainable();
    let main_inputs = Inputs::new(&model, &data.images)?;
    // Flattened (group, sample) index of the subsidiary data.
    let (sub_inputs, sub_index) = match subsidiary {
        Some(task) => {
            let mut inputs = Vec::new();
            let mut index = Vec::new();
            for (gi, g) in task.groups.iter().enumerate() {
                for (si, im) in g.images.iter().enumerate() {
                    inputs.push(*im);
                    index.push((gi, si));
                }
            }
            (Some(Inputs::new(&model, &inputs)?), index)
        }
        None => (None, Vec::new()),
    };

    let mut rng = rng_from(derive_seed(cfg.seed, "shuffle"));
    let n = data.len();
    let steps = n.div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut sub_order: Vec<usize> = (0..sub_index.len()).collect();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        sub_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_sub = 0.0;
        for step in 0..steps {
            let batch = &order[step * cfg.batch_size..((step + 1) * cfg.batch_size).min(n)];
            let mut grads = model.params.zeros_like();
            let inputs: Vec<ImageInput<'_>> = batch.iter().map(|&i| main_inputs.get(i)).collect();
            let tgts: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let w = vec![1.0 / batch.len() as f64; batch.len()];
            let l = prompt_cross_entropy(&model, &inputs, &tgts, &w, prompts, Some(&mut grads))?;
            epoch_loss += l * batch.len() as f64;

            if let (Some(task), Some(sub_in)) = (subsidiary, sub_inputs.as_ref()) {
                let m = sub_order.len();
                let chunk = &sub_order[step * m / steps..(step + 1) * m / steps];
                let groups = task.groups.len() as f64;
                for (gi, g) in task.groups.iter().enumerate() {
                    let members: Vec<usize> = chunk.iter().copied().filter(|&k| sub_index[k].0 == gi).collect();
                    if members.is_empty() {
                        continue;
                    }
                    let inputs: Vec<ImageInput<'_>> = members.iter().map(|&k| sub_in.get(k)).collect();
                    let tgts: Vec<usize> = members.iter().map(|&k| g.targets[sub_index[k].1]).collect();
                    // Each category contributes equally; every sample is visited once per epoch.
                    let unit = 1.0 / (groups * g.images.len() as f64);
                    let unit_w = vec![unit; members.len()];
                    let raw = prompt_cross_entropy(&model, &inputs, &tgts, &unit_w, &g.prompts, None)?;
                    epoch_sub += raw;
                    let scaled = vec![task.lambda * steps as f64 * unit; members.len()];
                    prompt_cross_entropy(&model, &inputs, &tgts, &scaled, &g.prompts, Some(&mut grads))?;
                }
            }

            model.params.axpy_named(-cfg.learning_rate, &grads, trainable);
        }
        loss_trace.push(epoch_loss / n as f64);
        if subsidiary.is_some() {
            subsidiary_trace.push(epoch_sub);
        }
    }
    Ok(FitOutcome {
        model,
        loss_trace,
        subsidiary_trace,
    })
}

/// Mean main cross-entropy of `model` over a whole training set.
pub fn mean_main_loss(model: &DualEncoderModel, data: &TrainingSet<'_>, prompts: &[ClassPrompt]) -> Result<f64> {
    let slot: HashMap<usize, usize> = prompts.iter().enumerate().map(|(i, p)| (p.category_id, i)).collect();
    let targets: Vec<usize> = data
        .labels
        .iter()
        .map(|l| slot.get(l).copied().ok_or_else(|| Error::config(format!("label {l} has no prompt"))))
        .collect::<Result<_>>()?;
    let inputs: Vec<ImageInput<'_>> = data.images.iter().map(|im| ImageInput::Pixels(im)).collect();
    let w = vec![1.0 / data.len() as f64; data.len()];
    prompt_cross_entropy(model, &inputs, &targets, &w, prompts, None)
}
