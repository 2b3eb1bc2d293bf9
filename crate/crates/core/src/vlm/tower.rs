//! Forward and backward passes for both encoder towers.
//!
//! Image tower: conv(3x3, stride 2) -> ReLU -> conv(3x3, stride 2) -> ReLU ->
//! [flattened map, per-channel spatial mean] -> linear projection -> residual
//! adapter -> L2 normalization. The pooled means give the projection
//! translation-invariant texture statistics.
//! Text tower: mean of token embeddings (+ category prefix) -> linear
//! projection -> L2 normalization.

use super::params::ModelParams;
use crate::math;

/// Geometry of one stride-2, pad-1, 3x3 convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvShape {
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_size: usize,
}

impl ConvShape {
    pub fn out_size(&self) -> usize {
        self.in_size / 2
    }
}

pub fn conv_forward(shape: ConvShape, w: &[f64], b: &[f64], input: &[f64]) -> Vec<f64> {
    let (n, m) = (shape.in_size, shape.out_size());
    let mut out = vec![0.0; shape.out_ch * m * m];
    for o in 0..shape.out_ch {
        let plane = &mut out[o * m * m..(o + 1) * m * m];
        plane.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..shape.in_ch {
            let src = &input[c * n * n..(c + 1) * n * n];
            for ki in 0..3 {
                for kj in 0..3 {
                    let wv = w[((o * shape.in_ch + c) * 3 + ki) * 3 + kj];
                    for i in 0..m {
                        let y = 2 * i + ki;
                        if y == 0 || y > n {
                            continue;
                        }
                        let row = &src[(y - 1) * n..y * n];
                        let dst = &mut plane[i * m..(i + 1) * m];
                        // x = 2j + kj - 1 must lie in [0, n)
                        let j0 = if kj == 0 { 1 } else { 0 };
                        for j in j0..m {
                            let x = 2 * j + kj - 1;
                            if x >= n {
                                break;
                            }
                            dst[j] += wv * row[x];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and optionally returns the input gradient.
pub fn conv_backward(
    shape: ConvShape,
    w: &[f64],
    input: &[f64],
    dout: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_dinput: bool,
) -> Option<Vec<f64>> {
    let (n, m) = (shape.in_size, shape.out_size());
    let mut din = if want_dinput {
        Some(vec![0.0; shape.in_ch * n * n])
    } else {
        None
    };
    for o in 0..shape.out_ch {
        let dplane = &dout[o * m * m..(o + 1) * m * m];
        db[o] += dplane.iter().sum::<f64>();
        for c in 0..shape.in_ch {
            let src = &input[c * n * n..(c + 1) * n * n];
            for ki in 0..3 {
                for kj in 0..3 {
                    let widx = ((o * shape.in_ch + c) * 3 + ki) * 3 + kj;
                    let wv = w[widx];
                    let mut acc = 0.0;
                    for i in 0..m {
                        let y = 2 * i + ki;
                        if y == 0 || y > n {
                            continue;
                        }
                        let drow = &dplane[i * m..(i + 1) * m];
                        let row = &src[(y - 1) * n..y * n];
                        let j0 = if kj == 0 { 1 } else { 0 };
                        for j in j0..m {
                            let x = 2 * j + kj - 1;
                            if x >= n {
                                break;
                            }
                            acc += drow[j] * row[x];
                        }
                        if let Some(din) = din.as_mut() {
                            let dst = &mut din[c * n * n + (y - 1) * n..c * n * n + y * n];
                            for j in j0..m {
                                let x = 2 * j + kj - 1;
                                if x >= n {
                                    break;
                                }
                                dst[x] += wv * drow[j];
                            }
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    din
}

/// Cached activations of the image trunk (everything before the adapter).
#[derive(Debug, Clone)]
pub struct TrunkActivations {
    pub input: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    /// `h2` followed by its per-channel means; the projection input.
    pub features: Vec<f64>,
    /// Raw projected embedding, before adapter and normalization.
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct TrunkShape {
    pub conv1: ConvShape,
    pub conv2: ConvShape,
    pub embed_dim: usize,
}

impl TrunkShape {
    pub fn flat_dim(&self) -> usize {
        let m = self.conv2.out_size();
        self.conv2.out_ch * m * m
    }

    /// Width of the projection input: flattened map plus pooled channels.
    pub fn feature_dim(&self) -> usize {
        self.flat_dim() + self.conv2.out_ch
    }
}

fn with_channel_means(h: &[f64], channels: usize) -> Vec<f64> {
    let plane = h.len() / channels;
    let mut out = Vec::with_capacity(h.len() + channels);
    out.extend_from_slice(h);
    out.extend(h.chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64));
    out
}

pub fn trunk_forward(shape: TrunkShape, p: &ModelParams, input: Vec<f64>) -> TrunkActivations {
    let mut h1 = conv_forward(shape.conv1, &p.conv1_w.data, &p.conv1_b.data, &input);
    h1.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut h2 = conv_forward(shape.conv2, &p.conv2_w.data, &p.conv2_b.data, &h1);
    h2.iter_mut().for_each(|v| *v = v.max(0.0));
    let features = with_channel_means(&h2, shape.conv2.out_ch);
    let mut z = math::matvec(&p.image_proj_w.data, shape.embed_dim, &features);
    math::axpy(&mut z, 1.0, &p.image_proj_b.data);
    TrunkActivations { input, h1, h2, features, z }
}

/// Backpropagates `dz` through the trunk, accumulating into `g`.
pub fn trunk_backward(
    shape: TrunkShape,
    p: &ModelParams,
    acts: &TrunkActivations,
    dz: &[f64],
    g: &mut ModelParams,
    want_dinput: bool,
) -> Option<Vec<f64>> {
    math::add_outer(&mut g.image_proj_w.data, dz, &acts.features);
    math::axpy(&mut g.image_proj_b.data, 1.0, dz);
    let dfeat = math::matvec_t(&p.image_proj_w.data, shape.feature_dim(), dz);
    let flat = shape.flat_dim();
    let plane = flat / shape.conv2.out_ch;
    let mut dh2 = dfeat[..flat].to_vec();
    for (ch, dplane) in dh2.chunks_mut(plane).enumerate() {
        let share = dfeat[flat + ch] / plane as f64;
        dplane.iter_mut().for_each(|d| *d += share);
    }
    for (d, &h) in dh2.iter_mut().zip(&acts.h2) {
        if h <= 0.0 {
            *d = 0.0;
        }
    }
    let mut dh1 = conv_backward(
        shape.conv2,
        &p.conv2_w.data,
        &acts.h1,
        &dh2,
        &mut g.conv2_w.data,
        &mut g.conv2_b.data,
        true,
    )
    .expect("requested");
    for (d, &h) in dh1.iter_mut().zip(&acts.h1) {
        if h <= 0.0 {
            *d = 0.0;
        }
    }
    conv_backward(
        shape.conv1,
        &p.conv1_w.data,
        &acts.input,
        &dh1,
        &mut g.conv1_w.data,
        &mut g.conv1_b.data,
        want_dinput,
    )
}

/// Adapter + normalization applied on top of the raw image embedding.
#[derive(Debug, Clone)]
pub struct HeadActivations {
    pub u_norm: f64,
    pub out: Vec<f64>,
}

pub fn head_forward(p: &ModelParams, z: &[f64]) -> HeadActivations {
    let d = z.len();
    let mut u = math::matvec(&p.adapter.data, d, z);
    math::axpy(&mut u, 1.0, z);
    let u_norm = math::norm(&u);
    let out = if u_norm == 0.0 {
        u
    } else {
        u.iter().map(|v| v / u_norm).collect()
    };
    HeadActivations { u_norm, out }
}

/// Returns `dz` and accumulates the adapter gradient.
pub fn head_backward(p: &ModelParams, z: &[f64], acts: &HeadActivations, dout: &[f64], g: &mut ModelParams) -> Vec<f64> {
    let d = z.len();
    let du = math::normalize_backward(acts.u_norm, &acts.out, dout);
    math::add_outer(&mut g.adapter.data, &du, z);
    let mut dz = math::matvec_t(&p.adapter.data, d, &du);
    math::axpy(&mut dz, 1.0, &du);
    dz
}

#[derive(Debug, Clone)]
pub struct TextActivations {
    pub tokens: Vec<usize>,
    pub prefix: Option<usize>,
    pub z_norm: f64,
    pub out: Vec<f64>,
}

pub fn text_forward(p: &ModelParams, embed_dim: usize, tokens: &[usize], prefix: Option<usize>) -> TextActivations {
    let e = p.token_emb.shape[1];
    let mut pooled = vec![0.0; e];
    for &t in tokens {
        math::axpy(&mut pooled, 1.0, p.token_emb.row(t));
    }
    let inv = 1.0 / tokens.len() as f64;
    pooled.iter_mut().for_each(|v| *v *= inv);
    if let Some(k) = prefix {
        math::axpy(&mut pooled, 1.0, p.prefixes.row(k));
    }
    let mut z = math::matvec(&p.text_proj_w.data, embed_dim, &pooled);
    math::axpy(&mut z, 1.0, &p.text_proj_b.data);
    let z_norm = math::norm(&z);
    let out = if z_norm == 0.0 {
        z
    } else {
        z.iter().map(|v| v / z_norm).collect()
    };
    // pooled is recomputed in backward; it is cheap.
    TextActivations {
        tokens: tokens.to_vec(),
        prefix,
        z_norm,
        out,
    }
}

pub fn text_backward(p: &ModelParams, acts: &TextActivations, dout: &[f64], g: &mut ModelParams) {
    let e = p.token_emb.shape[1];
    let dz = math::normalize_backward(acts.z_norm, &acts.out, dout);
    let mut pooled = vec![0.0; e];
    for &t in &acts.tokens {
        math::axpy(&mut pooled, 1.0, p.token_emb.row(t));
    }
    let inv = 1.0 / acts.tokens.len() as f64;
    pooled.iter_mut().for_each(|v| *v *= inv);
    if let Some(k) = acts.prefix {
        math::axpy(&mut pooled, 1.0, p.prefixes.row(k));
    }
    math::add_outer(&mut g.text_proj_w.data, &dz, &pooled);
    math::axpy(&mut g.text_proj_b.data, 1.0, &dz);
    let dpooled = math::matvec_t(&p.text_proj_w.data, e, &dz);
    for &t in &acts.tokens {
        math::axpy(g.token_emb.row_mut(t), inv, &dpooled);
    }
    if let Some(k) = acts.prefix {
        math::axpy(g.prefixes.row_mut(k), 1.0, &dpooled);
    }
}
