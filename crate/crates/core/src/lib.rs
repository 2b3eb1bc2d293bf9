//! Spurious attribute probing and shielding for a small dual-encoder
//! vision-language model trained on synthetic data with planted shortcuts.

// `!(x > 0.0)` is how the validators reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops read better in the convolution kernels.
#![allow(clippy::needless_range_loop)]

pub mod attributes;
pub mod cbm;
pub mod config;
pub mod datagen;
pub mod eval;
pub mod error;
pub mod image;
pub mod math;
pub mod pipeline;
pub mod sap;
pub mod sas;
pub mod seed;
pub mod vlm;

pub use attributes::{Attribute, AttributeKind, AttributeOrigin, AttributePool};
pub use cbm::{CbmProbe, ThresholdMode, ThresholdPolicy};
pub use datagen::{Category, DatasetSpec, GeneratorKind, GroupedDataset, Sample, Split};
pub use error::{Error, Result};
pub use image::Image;
pub use sap::AttributeSource;
pub use vlm::{AdaptationMode, ClassPrompt, DualEncoderModel, ModelConfig, TrainConfig};
