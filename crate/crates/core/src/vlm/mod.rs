//! The dual-encoder vision-language model: encoders, the prompt-conditioned
//! prediction distribution, pre-training, adaptation and checkpoints.

mod checkpoint;
pub mod objective;
mod params;
mod pretrain;
pub mod tower;
mod train;
mod vocab;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{ModelParams, Tensor, PARAM_NAMES};
pub use pretrain::{contrastive_batch_loss, pretrain, CaptionedImage, PretrainConfig, PretrainOutcome};
pub use train::{fit_main, mean_main_loss, FitOutcome, SubsidiaryGroup, SubsidiaryTask, TrainConfig, TrainingSet};
pub use vocab::{tokenize, Vocabulary};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::math;
use crate::seed::rng_from;
use tower::{ConvShape, TrunkShape};

/// Which parameters fine-tuning may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationMode {
    /// Per-category prompt prefixes plus the residual image adapter.
    #[default]
    Peft,
    /// Every tensor of both towers.
    Full,
}

impl AdaptationMode {
    pub fn trainable(&self) -> &'static [&'static str] {
        match self {
            AdaptationMode::Peft => &PARAM_NAMES[9..],
            AdaptationMode::Full => &PARAM_NAMES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub embed_dim: usize,
    pub token_dim: usize,
    pub temperature: f64,
    pub adaptation: AdaptationMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            conv1_channels: 8,
            conv2_channels: 16,
            embed_dim: 64,
            token_dim: 32,
            temperature: 0.07,
            adaptation: AdaptationMode::Peft,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if self.image_size < 4 || !self.image_size.is_multiple_of(4) {
            return Err(Error::config("image_size must be a positive multiple of 4"));
        }
        if self.embed_dim == 0 || self.token_dim == 0 || self.conv1_channels == 0 || self.conv2_channels == 0 {
            return Err(Error::config("layer sizes must be positive"));
        }
        Ok(())
    }

    pub(crate) fn trunk_shape(&self) -> TrunkShape {
        TrunkShape {
            conv1: ConvShape {
                in_ch: CHANNELS,
                out_ch: self.conv1_channels,
                in_size: self.image_size,
            },
            conv2: ConvShape {
                in_ch: self.conv1_channels,
                out_ch: self.conv2_channels,
                in_size: self.image_size / 2,
            },
            embed_dim: self.embed_dim,
        }
    }
}

/// Category prompt: the text fed to the language tower for one class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPrompt {
    pub category_id: usize,
    pub text: String,
}

impl ClassPrompt {
    pub fn new(category_id: usize, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::input("prompt text is empty"));
        }
        Ok(Self { category_id, text })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
}

impl DualEncoderModel {
    /// Randomly initialized model with `categories` prefix slots.
    pub fn new(config: ModelConfig, vocab: Vocabulary, categories: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.is_empty() {
            return Err(Error::config("vocabulary is empty"));
        }
        let mut rng = rng_from(seed);
        let shape = config.trunk_shape();
        let (c1, c2, d, e) = (
            config.conv1_channels,
            config.conv2_channels,
            config.embed_dim,
            config.token_dim,
        );
        let mut init = |shape: &[usize], std: f64| {
            let n = Normal::new(0.0, std).expect("finite std");
            Tensor::from_fn(shape, || n.sample(&mut rng))
        };
        let conv1_w = init(&[c1, CHANNELS, 3, 3], (2.0 / (CHANNELS * 9) as f64).sqrt());
        let conv2_w = init(&[c2, c1, 3, 3], (2.0 / (c1 * 9) as f64).sqrt());
        let image_proj_w = init(&[d, shape.feature_dim()], (1.0 / shape.feature_dim() as f64).sqrt());
        let token_emb = init(&[vocab.len(), e], 1.0);
        let text_proj_w = init(&[d, e], (1.0 / e as f64).sqrt());
        let params = ModelParams {
            conv1_w,
            conv1_b: Tensor::zeros(&[c1]),
            conv2_w,
            conv2_b: Tensor::zeros(&[c2]),
            image_proj_w,
            image_proj_b: Tensor::zeros(&[d]),
            token_emb,
            text_proj_w,
            text_proj_b: Tensor::zeros(&[d]),
            prefixes: Tensor::zeros(&[categories, e]),
            adapter: Tensor::zeros(&[d, d]),
        };
        Ok(Self { config, vocab, params })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn temperature(&self) -> f64 {
        self.config.temperature
    }

    pub fn prefix_slots(&self) -> usize {
        self.params.prefixes.shape[0]
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.config.image_size;
        if image.height() != s || image.width() != s {
            return Err(Error::input(format!(
                "image is {}x{}, model expects {s}x{s}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Raw trunk output (before the adapter). Frozen under PEFT, so it can be cached.
    pub fn image_features(&self, image: &Image) -> Result<Vec<f64>> {
        self.check_image(image)?;
        Ok(tower::trunk_forward(self.config.trunk_shape(), &self.params, image.to_chw()).z)
    }

    /// Applies the adapter and normalization to cached trunk features.
    pub fn embed_features(&self, features: &[f64]) -> Vec<f64> {
        tower::head_forward(&self.params, features).out
    }

    pub fn encode_image(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.embed_features(&self.image_features(image)?))
    }

    pub fn encode_images(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        images.iter().map(|im| self.encode_image(im)).collect()
    }

    fn prefix_for(&self, category_id: usize) -> Option<usize> {
        (category_id < self.prefix_slots()).then_some(category_id)
    }

    pub fn encode_text(&self, prompt: &ClassPrompt) -> Result<Vec<f64>> {
        let tokens = self.vocab.encode(&prompt.text)?;
        Ok(tower::text_forward(&self.params, self.embed_dim(), &tokens, self.prefix_for(prompt.category_id)).out)
    }

    /// Encodes free text without any category prefix (attributes, captions).
    pub fn encode_phrase(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = self.vocab.encode(text)?;
        Ok(tower::text_forward(&self.params, self.embed_dim(), &tokens, None).out)
    }

    pub fn encode_prompts(&self, prompts: &[ClassPrompt]) -> Result<Vec<Vec<f64>>> {
        prompts.iter().map(|p| self.encode_text(p)).collect()
    }

    /// Softmax over cosine similarities divided by the temperature.
    pub fn predict_distribution(&self, image: &Image, prompts: &[ClassPrompt]) -> Result<Vec<f64>> {
        if prompts.is_empty() {
            return Err(Error::input("prediction needs at least one prompt"));
        }
        let img = self.encode_image(image)?;
        let texts = self.encode_prompts(prompts)?;
        Ok(distribution_from_embeddings(&img, &texts, self.temperature()))
    }

    /// Index into `prompts` of the most likely class for each image.
    pub fn predict_indices(&self, images: &[&Image], prompts: &[ClassPrompt]) -> Result<Vec<usize>> {
        if prompts.is_empty() {
            return Err(Error::input("prediction needs at least one prompt"));
        }
        let texts = self.encode_prompts(prompts)?;
        images
            .iter()
            .map(|im| {
                let e = self.encode_image(im)?;
                let sims: Vec<f64> = texts.iter().map(|t| math::dot(&e, t)).collect();
                Ok(math::argmax(&sims))
            })
            .collect()
    }
}

/// Prediction distribution from already-normalized embeddings.
pub fn distribution_from_embeddings(image: &[f64], texts: &[Vec<f64>], temperature: f64) -> Vec<f64> {
    let sims: Vec<f64> = texts.iter().map(|t| math::dot(image, t)).collect();
    distribution_from_similarities(&sims, temperature)
}

pub fn distribution_from_similarities(sims: &[f64], temperature: f64) -> Vec<f64> {
    let logits: Vec<f64> = sims.iter().map(|s| s / temperature).collect();
    math::softmax(&logits)
}
