//! Helpers shared by the integration tests and the acceptance harness:
//! independent reference implementations and small fixtures.

#![allow(dead_code, clippy::needless_range_loop)]

use attrshield::config::RunConfig;
use attrshield::vlm::objective::{prompt_cross_entropy, ImageInput};
use attrshield::vlm::{ClassPrompt, DualEncoderModel, ModelConfig, ModelParams, Vocabulary};
use attrshield::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn config(overrides: &[String]) -> RunConfig {
    RunConfig::resolve(None, overrides).expect("valid overrides")
}

pub fn random_image(size: usize, rng: &mut impl Rng) -> Image {
    Image::from_fn(size, size, |_, _| [rng.random(), rng.random(), rng.random()])
}

/// A small randomly initialized model over a fixed toy vocabulary. The
/// adapter is perturbed away from zero so its gradient path is exercised.
pub fn toy_model(seed: u64) -> DualEncoderModel {
    let vocab = Vocabulary::from_texts(["a photo of a red circle", "blue square green stripes", "dots on a triangle"]);
    let mut model = DualEncoderModel::new(ModelConfig::default(), vocab, 3, seed).expect("model");
    let mut r = rng(seed ^ 0x5eed);
    for x in model.params.adapter.data.iter_mut() {
        *x = r.random_range(-0.05..0.05);
    }
    for x in model.params.prefixes.data.iter_mut() {
        *x = r.random_range(-0.1..0.1);
    }
    model
}

pub fn toy_prompts() -> Vec<ClassPrompt> {
    vec![
        ClassPrompt::new(0, "a photo of a red circle").unwrap(),
        ClassPrompt::new(1, "a photo of a blue square").unwrap(),
        ClassPrompt::new(2, "dots on a green triangle").unwrap(),
    ]
}

/// Softmax cross-entropy of each image against the prompts, computed from
/// the public encoders alone, averaged over images.
pub fn reference_cross_entropy(model: &DualEncoderModel, images: &[&Image], targets: &[usize], prompts: &[ClassPrompt]) -> f64 {
    let texts: Vec<Vec<f64>> = prompts.iter().map(|p| model.encode_text(p).unwrap()).collect();
    let tau = model.temperature();
    let mut total = 0.0;
    for (img, &t) in images.iter().zip(targets) {
        let e = model.encode_image(img).unwrap();
        let logits: Vec<f64> = texts.iter().map(|w| e.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / tau).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        total += -(logits[t] - m - z.ln());
    }
    total / images.len() as f64
}

/// Norm-wise relative error between analytic and central-difference
/// gradients over `per_tensor` random coordinates of every tensor.
pub fn gradient_check(
    model: &DualEncoderModel,
    images: &[&Image],
    targets: &[usize],
    prompts: &[ClassPrompt],
    per_tensor: usize,
    seed: u64,
) -> f64 {
    let weights = vec![1.0 / images.len() as f64; images.len()];
    let inputs: Vec<ImageInput<'_>> = images.iter().map(|im| ImageInput::Pixels(im)).collect();
    let mut grads: ModelParams = model.params.zeros_like();
    prompt_cross_entropy(model, &inputs, targets, &weights, prompts, Some(&mut grads)).unwrap();
    let loss = |m: &DualEncoderModel| prompt_cross_entropy(m, &inputs, targets, &weights, prompts, None).unwrap();
    let mut r = rng(seed);
    let base = loss(model);
    let (mut num, mut a_norm, mut f_norm) = (0.0, 0.0, 0.0);
    let names: Vec<&str> = model.params.tensors().iter().map(|(n, _)| *n).collect();
    for name in names {
        let len = model.params.get(name).unwrap().len();
        for _ in 0..per_tensor.min(len) {
            let i = r.random_range(0..len);
            let fd = central_difference(model, name, i, base, &loss);
            let an = grads.get(name).unwrap().data[i];
            num += (fd - an).powi(2);
            a_norm += an * an;
            f_norm += fd * fd;
        }
    }
    num.sqrt() / a_norm.sqrt().max(f_norm.sqrt()).max(1e-12)
}

/// Central difference of `loss` in one coordinate. A ReLU unit whose input
/// crosses zero inside the step makes the two one-sided slopes disagree; the
/// step is then shrunk until they agree, so the estimate reflects the local
/// derivative rather than the kink.
fn central_difference(model: &DualEncoderModel, name: &str, i: usize, base: f64, loss: &dyn Fn(&DualEncoderModel) -> f64) -> f64 {
    let mut eps = 1e-5;
    loop {
        let mut plus = model.clone();
        plus.params.get_mut(name).unwrap().data[i] += eps;
        let mut minus = model.clone();
        minus.params.get_mut(name).unwrap().data[i] -= eps;
        let (lp, lm) = (loss(&plus), loss(&minus));
        let (fwd, bwd) = ((lp - base) / eps, (base - lm) / eps);
        if (fwd - bwd).abs() <= 1e-3 * fwd.abs().max(bwd.abs()).max(1e-3) || eps < 1e-8 {
            return (lp - lm) / (2.0 * eps);
        }
        eps /= 10.0;
    }
}

/// Multinomial logistic regression without bias, minimizing
/// `mean CE + l2/2 ||W||^2` by Newton's method on the full Hessian.
pub fn logistic_regression_newton(x: &[Vec<f64>], y: &[usize], k: usize, l2: f64) -> Vec<Vec<f64>> {
    let n = x[0].len();
    let dim = k * n;
    let m = x.len() as f64;
    let mut w = vec![0.0; dim];
    for _ in 0..100 {
        let mut g = vec![0.0; dim];
        let mut h = vec![vec![0.0; dim]; dim];
        for (xi, &yi) in x.iter().zip(y) {
            let logits: Vec<f64> = (0..k).map(|c| (0..n).map(|j| w[c * n + j] * xi[j]).sum()).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            let p: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / z).collect();
            for c in 0..k {
                let r = p[c] - if c == yi { 1.0 } else { 0.0 };
                for j in 0..n {
                    g[c * n + j] += r * xi[j] / m;
                }
                for d in 0..k {
                    let s = p[c] * (if c == d { 1.0 } else { 0.0 } - p[d]);
                    for j in 0..n {
                        for l in 0..n {
                            h[c * n + j][d * n + l] += s * xi[j] * xi[l] / m;
                        }
                    }
                }
            }
        }
        for i in 0..dim {
            g[i] += l2 * w[i];
            h[i][i] += l2;
        }
        if g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-12 {
            break;
        }
        let step = solve(h, g);
        for i in 0..dim {
            w[i] -= step[i];
        }
    }
    (0..k).map(|c| w[c * n..(c + 1) * n].to_vec()).collect()
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for c in col..n {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap()
}
