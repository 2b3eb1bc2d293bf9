//! Small dense-vector helpers shared by the encoders, probes and losses.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `a / |a|`. A zero vector is returned unchanged.
pub fn normalized(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    if n == 0.0 {
        return a.to_vec();
    }
    a.iter().map(|x| x / n).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// Index of the largest entry; the first one wins on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Backward pass of `y = x / |x|`: maps `dy` to `dx`.
pub fn normalize_backward(x_norm: f64, y: &[f64], dy: &[f64]) -> Vec<f64> {
    let proj = dot(y, dy);
    y.iter()
        .zip(dy)
        .map(|(yi, dyi)| (dyi - yi * proj) / x_norm)
        .collect()
}

/// Dense row-major matrix-vector product: `out = m * v` with `m` of shape rows x v.len().
pub fn matvec(m: &[f64], rows: usize, v: &[f64]) -> Vec<f64> {
    let cols = v.len();
    debug_assert_eq!(m.len(), rows * cols);
    (0..rows).map(|r| dot(&m[r * cols..(r + 1) * cols], v)).collect()
}

/// `out = m^T * v` with `m` of shape v.len() x cols.
pub fn matvec_t(m: &[f64], cols: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, &vr) in v.iter().enumerate() {
        if vr == 0.0 {
            continue;
        }
        let row = &m[r * cols..(r + 1) * cols];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += w * vr;
        }
    }
    out
}

/// Accumulates the outer product `acc += a b^T` into a row-major buffer.
pub fn add_outer(acc: &mut [f64], a: &[f64], b: &[f64]) {
    let cols = b.len();
    for (r, &ar) in a.iter().enumerate() {
        if ar == 0.0 {
            continue;
        }
        let row = &mut acc[r * cols..(r + 1) * cols];
        for (o, &bc) in row.iter_mut().zip(b) {
            *o += ar * bc;
        }
    }
}

pub fn axpy(acc: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += alpha * v;
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_two_logits() {
        let p = softmax(&[2.0, 1.0]);
        assert!((p[0] - 0.731_058_578_6).abs() < 1e-9);
        assert!((p[1] - 0.268_941_421_4).abs() < 1e-9);
    }

    #[test]
    fn log_sum_exp_is_stable_for_large_inputs() {
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[0.5, 0.7, 0.7]), 1);
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let x = [0.3, -1.2, 0.7];
        let dy = [0.5, 0.1, -0.4];
        let f = |x: &[f64]| dot(&normalized(x), &dy);
        let y = normalized(&x);
        let g = normalize_backward(norm(&x), &y, &dy);
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }
}
