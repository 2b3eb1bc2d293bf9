use serde::{Deserialize, Serialize};

/// A dense row-major parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut() -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| f()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Row `r` of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.shape[1];
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Stable tensor names, in checkpoint order.
pub const PARAM_NAMES: [&str; 11] = [
    "image.conv1.weight",
    "image.conv1.bias",
    "image.conv2.weight",
    "image.conv2.bias",
    "image.proj.weight",
    "image.proj.bias",
    "text.token_embedding",
    "text.proj.weight",
    "text.proj.bias",
    "adapt.prefixes",
    "adapt.image_adapter",
];

/// Every learnable tensor of the dual encoder. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub image_proj_w: Tensor,
    pub image_proj_b: Tensor,
    pub token_emb: Tensor,
    pub text_proj_w: Tensor,
    pub text_proj_b: Tensor,
    /// One additive context vector per real category (token space).
    pub prefixes: Tensor,
    /// Residual linear adapter on the image embedding, zero-initialized.
    pub adapter: Tensor,
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(&t.shape);
        Self {
            conv1_w: z(&self.conv1_w),
            conv1_b: z(&self.conv1_b),
            conv2_w: z(&self.conv2_w),
            conv2_b: z(&self.conv2_b),
            image_proj_w: z(&self.image_proj_w),
            image_proj_b: z(&self.image_proj_b),
            token_emb: z(&self.token_emb),
            text_proj_w: z(&self.text_proj_w),
            text_proj_b: z(&self.text_proj_b),
            prefixes: z(&self.prefixes),
            adapter: z(&self.adapter),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 11] {
        [
            (PARAM_NAMES[0], &self.conv1_w),
            (PARAM_NAMES[1], &self.conv1_b),
            (PARAM_NAMES[2], &self.conv2_w),
            (PARAM_NAMES[3], &self.conv2_b),
            (PARAM_NAMES[4], &self.image_proj_w),
            (PARAM_NAMES[5], &self.image_proj_b),
            (PARAM_NAMES[6], &self.token_emb),
            (PARAM_NAMES[7], &self.text_proj_w),
            (PARAM_NAMES[8], &self.text_proj_b),
            (PARAM_NAMES[9], &self.prefixes),
            (PARAM_NAMES[10], &self.adapter),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 11] {
        [
            (PARAM_NAMES[0], &mut self.conv1_w),
            (PARAM_NAMES[1], &mut self.conv1_b),
            (PARAM_NAMES[2], &mut self.conv2_w),
            (PARAM_NAMES[3], &mut self.conv2_b),
            (PARAM_NAMES[4], &mut self.image_proj_w),
            (PARAM_NAMES[5], &mut self.image_proj_b),
            (PARAM_NAMES[6], &mut self.token_emb),
            (PARAM_NAMES[7], &mut self.text_proj_w),
            (PARAM_NAMES[8], &mut self.text_proj_b),
            (PARAM_NAMES[9], &mut self.prefixes),
            (PARAM_NAMES[10], &mut self.adapter),
        ]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for (_, t) in self.tensors_mut() {
            for v in t.data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// `self += alpha * other` over the named tensors only.
    pub fn axpy_named(&mut self, alpha: f64, other: &ModelParams, names: &[&str]) {
        for (name, t) in self.tensors_mut() {
            if names.contains(&name) {
                let src = other.get(name).expect("same layout");
                for (a, b) in t.data.iter_mut().zip(&src.data) {
                    *a += alpha * b;
                }
            }
        }
    }
}
