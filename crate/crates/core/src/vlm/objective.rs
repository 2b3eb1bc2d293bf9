//! Prompt-classification losses and their gradients.
//!
//! Both the main objective and the per-category subsidiary objective are
//! softmax cross-entropies of an image against a set of prompts, so they
//! share [`prompt_cross_entropy`].

use super::params::ModelParams;
use super::tower::{self, HeadActivations, TextActivations, TrunkActivations};
use super::{ClassPrompt, DualEncoderModel};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math;

/// Either cached trunk features (frozen image tower) or raw pixels.
#[derive(Debug, Clone, Copy)]
pub enum ImageInput<'a> {
    Features(&'a [f64]),
    Pixels(&'a Image),
}

struct ImageForward {
    trunk: Option<TrunkActivations>,
    z: Vec<f64>,
    head: HeadActivations,
}

fn image_forward(model: &DualEncoderModel, input: ImageInput<'_>) -> Result<ImageForward> {
    match input {
        ImageInput::Features(z) => {
            if z.len() != model.embed_dim() {
                return Err(Error::input("feature dimension mismatch"));
            }
            Ok(ImageForward {
                trunk: None,
                z: z.to_vec(),
                head: tower::head_forward(&model.params, z),
            })
        }
        ImageInput::Pixels(img) => {
            model.check_image(img)?;
            let acts = tower::trunk_forward(model.config.trunk_shape(), &model.params, img.to_chw());
            let head = tower::head_forward(&model.params, &acts.z);
            Ok(ImageForward {
                z: acts.z.clone(),
                trunk: Some(acts),
                head,
            })
        }
    }
}

fn text_forward(model: &DualEncoderModel, prompt: &ClassPrompt) -> Result<TextActivations> {
    let tokens = model.vocab.encode(&prompt.text)?;
    let prefix = (prompt.category_id < model.prefix_slots()).then_some(prompt.category_id);
    Ok(tower::text_forward(&model.params, model.embed_dim(), &tokens, prefix))
}

/// Weighted sum over samples of `-log softmax(sim / tau)[target]` over `prompts`.
///
/// When `grads` is given, the gradient of that sum is accumulated into it.
pub fn prompt_cross_entropy(
    model: &DualEncoderModel,
    inputs: &[ImageInput<'_>],
    targets: &[usize],
    weights: &[f64],
    prompts: &[ClassPrompt],
    grads: Option<&mut ModelParams>,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::input("cross-entropy needs at least one prompt"));
    }
    if inputs.len() != targets.len() || inputs.len() != weights.len() {
        return Err(Error::input("inputs, targets and weights differ in length"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= prompts.len()) {
        return Err(Error::input(format!("target {t} outside the prompt set")));
    }
    let tau = model.temperature();
    let texts: Vec<TextActivations> = prompts
        .iter()
        .map(|p| text_forward(model, p))
        .collect::<Result<_>>()?;
    let d = model.embed_dim();
    let want_grads = grads.is_some();
    let mut dtexts = vec![vec![0.0; d]; texts.len()];
    let mut loss = 0.0;
    let mut backlog = Vec::new();
    for ((input, &target), &w) in inputs.iter().zip(targets).zip(weights) {
        let fwd = image_forward(model, *input)?;
        let logits: Vec<f64> = texts.iter().map(|t| math::dot(&fwd.head.out, &t.out) / tau).collect();
        let lse = math::log_sum_exp(&logits);
        loss += w * (lse - logits[target]);
        if want_grads {
            let mut dout = vec![0.0; d];
            for (j, (t, &lj)) in texts.iter().zip(&logits).enumerate() {
                let pj = (lj - lse).exp();
                let dl = w * (pj - if j == target { 1.0 } else { 0.0 }) / tau;
                if dl != 0.0 {
                    math::axpy(&mut dout, dl, &t.out);
                    math::axpy(&mut dtexts[j], dl, &fwd.head.out);
                }
            }
            backlog.push((fwd, dout));
        }
    }
    if let Some(g) = grads {
        let shape = model.config.trunk_shape();
        for (fwd, dout) in backlog {
            let dz = tower::head_backward(&model.params, &fwd.z, &fwd.head, &dout, g);
            if let Some(trunk) = &fwd.trunk {
                tower::trunk_backward(shape, &model.params, trunk, &dz, g, false);
            }
        }
        for (acts, dt) in texts.iter().zip(&dtexts) {
            tower::text_backward(&model.params, acts, dt, g);
        }
    }
    Ok(loss)
}

/// Gradient of `cos(image, prompt)` with respect to the input pixels, in CHW layout.
pub fn similarity_pixel_gradient(model: &DualEncoderModel, image: &Image, prompt: &ClassPrompt) -> Result<Vec<f64>> {
    model.check_image(image)?;
    let text = text_forward(model, prompt)?;
    let shape = model.config.trunk_shape();
    let acts = tower::trunk_forward(shape, &model.params, image.to_chw());
    let head = tower::head_forward(&model.params, &acts.z);
    let mut scratch = model.params.zeros_like();
    let dz = tower::head_backward(&model.params, &acts.z, &head, &text.out, &mut scratch);
    Ok(tower::trunk_backward(shape, &model.params, &acts, &dz, &mut scratch, true).expect("requested"))
}
