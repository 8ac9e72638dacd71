//! Plain forward kernels shared by the model and the autodiff tape.

use crate::error::{LsiError, Result};
use crate::tensor::Matrix;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.7978845608028654; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

/// Per-row normalization to zero mean and unit variance, then `gain`/`bias`.
pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> Result<Matrix> {
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(LsiError::Shape(format!(
            "layer norm of width {} with gain {} / bias {}",
            x.cols(),
            gain.len(),
            bias.len()
        )));
    }
    let (normed, _) = normalize_rows(x);
    normed.scale_cols(gain)?.add_row_vector(bias)
}

/// Zero-mean unit-variance rows, plus each row's inverse standard deviation.
pub(crate) fn normalize_rows(x: &Matrix) -> (Matrix, Vec<f64>) {
    let n = x.cols() as f64;
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * is);
        inv.push(is);
    }
    (out, inv)
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row softmax of `scores * scale` with a causal mask (column > row masked out).
pub fn causal_softmax(scores: &Matrix, scale: f64) -> Matrix {
    let (n, m) = scores.shape();
    let mut out = Matrix::zeros(n, m);
    for r in 0..n {
        let visible = (r + 1).min(m);
        let row = &scores.row(r)[..visible];
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
        let mut denom = 0.0;
        let orow = out.row_mut(r);
        for (o, &s) in orow[..visible].iter_mut().zip(row) {
            *o = (s * scale - mx).exp();
            denom += *o;
        }
        orow[..visible].iter_mut().for_each(|o| *o /= denom);
    }
    out
}

/// Fixed sinusoidal position table, `len × width`.
pub fn sinusoidal_positions(len: usize, width: usize) -> Matrix {
    Matrix::from_fn(len, width, |pos, i| {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / width as f64);
        if i % 2 == 0 {
            (pos as f64 * freq).sin()
        } else {
            (pos as f64 * freq).cos()
        }
    })
}

/// Mean cross entropy of `logits` rows against integer targets, plus the
/// row-wise softmax probabilities.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != targets.len() {
        return Err(LsiError::Shape(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    let mut probs = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.cols() {
            return Err(LsiError::Domain(format!("target {t} outside vocabulary")));
        }
        let row = logits.row(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
        total += denom.ln() + mx - row[t];
        for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
            *p = (v - mx).exp() / denom;
        }
    }
    let n = targets.len().max(1) as f64;
    Ok((total / n, probs))
}
