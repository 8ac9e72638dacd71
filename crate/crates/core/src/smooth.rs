//! Equivalent transforms that move quantization difficulty between
//! activations and weights.

use serde::{Deserialize, Serialize};

use crate::error::{LsiError, Result};
use crate::tensor::Matrix;

/// Channel scale and shift for a linear input, plus the query/key scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothParams {
    pub s_c: Vec<f64>,
    pub delta: Vec<f64>,
    pub s_a: Vec<f64>,
}

impl SmoothParams {
    pub fn identity(channels: usize, head_dim: usize) -> Self {
        SmoothParams {
            s_c: vec![1.0; channels],
            delta: vec![0.0; channels],
            s_a: vec![1.0; head_dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_positive(&self.s_c, "s_c")?;
        check_positive(&self.s_a, "s_a")?;
        if self.delta.iter().any(|d| !d.is_finite()) {
            return Err(LsiError::Domain("non-finite shift".into()));
        }
        if self.delta.len() != self.s_c.len() {
            return Err(LsiError::Shape("shift and channel scale lengths differ".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_positive(v: &[f64], name: &str) -> Result<()> {
    match v.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
        Some(i) => Err(LsiError::Domain(format!(
            "{name}[{i}] = {} is not a positive finite scale",
            v[i]
        ))),
        None => Ok(()),
    }
}

/// `(x - δ) ⊘ s_c`, column-wise.
pub fn smooth_activation(x: &Matrix, s_c: &[f64], delta: &[f64]) -> Result<Matrix> {
    check_positive(s_c, "s_c")?;
    if x.cols() != s_c.len() || delta.len() != s_c.len() {
        return Err(LsiError::Shape(format!(
            "activation width {} vs scale {} / shift {}",
            x.cols(),
            s_c.len(),
            delta.len()
        )));
    }
    let neg: Vec<f64> = delta.iter().map(|d| -d).collect();
    x.add_row_vector(&neg)?.div_cols(s_c)
}

/// Transformed activation, weight and bias of a linear layer.
///
/// `x̃ = (x − δ) ⊘ s_c`, `w̃ = diag(s_c)·w`, `b̃ = b + δ·w`, so that
/// `x̃·w̃ + b̃ = x·w + b`.
pub fn smooth_linear(
    x: &Matrix,
    w: &Matrix,
    b: &[f64],
    p: &SmoothParams,
) -> Result<(Matrix, Matrix, Vec<f64>)> {
    if x.cols() != w.rows() || w.rows() != p.s_c.len() || p.delta.len() != p.s_c.len() {
        return Err(LsiError::Shape(format!(
            "x is {}x{}, w is {}x{}, s_c has {}, delta has {}",
            x.rows(),
            x.cols(),
            w.rows(),
            w.cols(),
            p.s_c.len(),
            p.delta.len()
        )));
    }
    if b.len() != w.cols() {
        return Err(LsiError::Shape(format!(
            "bias length {} for {} outputs",
            b.len(),
            w.cols()
        )));
    }
    let xt = smooth_activation(x, &p.s_c, &p.delta)?;
    let wt = w.scale_rows(&p.s_c)?;
    let shift = w.vec_mul(&p.delta)?;
    let bt = b.iter().zip(&shift).map(|(a, s)| a + s).collect();
    Ok((xt, wt, bt))
}

/// `q̃ = q ⊘ s_a`, `k̃ = k ⊙ s_a` column-wise, so `q̃·k̃ᵀ = q·kᵀ`.
pub fn smooth_attention(q: &Matrix, k: &Matrix, p: &SmoothParams) -> Result<(Matrix, Matrix)> {
    check_positive(&p.s_a, "s_a")?;
    if q.cols() != p.s_a.len() || k.cols() != p.s_a.len() {
        return Err(LsiError::Shape(format!(
            "q has {} cols, k has {}, s_a has {}",
            q.cols(),
            k.cols(),
            p.s_a.len()
        )));
    }
    Ok((q.div_cols(&p.s_a)?, k.scale_cols(&p.s_a)?))
}

/// Fold the channel scale and shift into a preceding normalization layer:
/// `gain' = gain ⊘ s_c`, `bias' = (bias − δ) ⊘ s_c`.
pub fn fold_scale_into_norm(
    gain: &[f64],
    bias: &[f64],
    p: &SmoothParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    fold_channel_into_norm(gain, bias, &p.s_c, &p.delta)
}

pub(crate) fn fold_channel_into_norm(
    gain: &[f64],
    bias: &[f64],
    s_c: &[f64],
    delta: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_positive(s_c, "s_c")?;
    if gain.len() != s_c.len() || bias.len() != s_c.len() || delta.len() != s_c.len() {
        return Err(LsiError::Shape("norm and smoothing lengths differ".into()));
    }
    let g = gain.iter().zip(s_c).map(|(g, s)| g / s).collect();
    let b = bias
        .iter()
        .zip(delta)
        .zip(s_c)
        .map(|((b, d), s)| (b - d) / s)
        .collect();
    Ok((g, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer_norm;
    use crate::tensor::seeded_rng;

    fn random_params(rng: &mut crate::tensor::RandomStream, c: usize, h: usize) -> SmoothParams {
        SmoothParams {
            s_c: rng.uniform_vec(c, 0.2, 5.0),
            delta: rng.uniform_vec(c, -1.0, 1.0),
            s_a: rng.uniform_vec(h, 0.2, 5.0),
        }
    }

    fn forward(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
        x.matmul(w).unwrap().add_row_vector(b).unwrap()
    }

    #[test]
    fn identity_params_change_nothing() {
        let mut rng = seeded_rng(1);
        let x = rng.normal_matrix(5, 4, 1.0);
        let w = rng.normal_matrix(4, 3, 1.0);
        let b = rng.uniform_vec(3, -1.0, 1.0);
        let p = SmoothParams::identity(4, 2);
        let (xt, wt, bt) = smooth_linear(&x, &w, &b, &p).unwrap();
        assert_eq!((xt, wt, bt), (x, w, b));
    }

    #[test]
    fn scalar_rounding_story() {
        // 1.3 × 15.4: rounding both to one digit loses the product, but
        // migrating a factor of 3.3 first keeps it.
        let (x, w) = (1.3_f64, 15.4_f64);
        assert_eq!(x.round() * w.round(), 15.0);
        let s = 1.3 / 4.3;
        let (xt, wt) = (x / s, s * w);
        assert!((xt - 4.3).abs() < 1e-12);
        assert_eq!((wt * 10.0).round() / 10.0, 4.7);
        assert_eq!(xt.round() * wt.round(), 20.0);
        assert!(((xt * wt) - x * w).abs() < 1e-12);
    }

    #[test]
    fn random_linear_equivalence() {
        let mut rng = seeded_rng(2);
        for _ in 0..20 {
            let x = rng.normal_matrix(7, 6, 2.0);
            let w = rng.normal_matrix(6, 5, 1.0);
            let b = rng.uniform_vec(5, -1.0, 1.0);
            let p = random_params(&mut rng, 6, 3);
            let (xt, wt, bt) = smooth_linear(&x, &w, &b, &p).unwrap();
            let d = forward(&xt, &wt, &bt).max_abs_diff(&forward(&x, &w, &b)).unwrap();
            assert!(d < 1e-9);
        }
    }

    #[test]
    fn attention_scalar_and_random() {
        let p = SmoothParams {
            s_c: vec![],
            delta: vec![],
            s_a: vec![2.0],
        };
        let (q, k) = smooth_attention(
            &Matrix::from_rows(&[vec![4.0]]),
            &Matrix::from_rows(&[vec![6.0]]),
            &p,
        )
        .unwrap();
        assert_eq!(q.get(0, 0), 2.0);
        assert_eq!(k.get(0, 0), 12.0);
        assert_eq!(q.get(0, 0) * k.get(0, 0), 24.0);

        let mut rng = seeded_rng(3);
        let q = rng.normal_matrix(6, 4, 1.0);
        let k = rng.normal_matrix(6, 4, 1.0);
        let p = random_params(&mut rng, 1, 4);
        let (qt, kt) = smooth_attention(&q, &k, &p).unwrap();
        let a = crate::tensor::matmul_nt(&q, &k).unwrap();
        let b = crate::tensor::matmul_nt(&qt, &kt).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
        let ident = SmoothParams::identity(1, 4);
        assert_eq!(smooth_attention(&q, &k, &ident).unwrap(), (q, k));
    }

    #[test]
    fn rejects_bad_scales() {
        let x = Matrix::zeros(2, 2);
        let w = Matrix::zeros(2, 2);
        let mut p = SmoothParams::identity(2, 2);
        p.s_c[1] = 0.0;
        assert!(matches!(
            smooth_linear(&x, &w, &[0.0, 0.0], &p),
            Err(LsiError::Domain(_))
        ));
        let mut p = SmoothParams::identity(2, 2);
        p.s_a[0] = -1.0;
        assert!(matches!(smooth_attention(&x, &x, &p), Err(LsiError::Domain(_))));
        let p = SmoothParams::identity(3, 2);
        assert!(matches!(
            smooth_linear(&x, &w, &[0.0, 0.0], &p),
            Err(LsiError::Shape(_))
        ));
    }

    #[test]
    fn norm_fold_cases() {
        let p = SmoothParams::identity(3, 1);
        let gain = vec![1.5, 0.5, 2.0];
        let bias = vec![0.1, -0.2, 0.3];
        assert_eq!(
            fold_scale_into_norm(&gain, &bias, &p).unwrap(),
            (gain.clone(), bias.clone())
        );
        let p = SmoothParams {
            s_c: gain.clone(),
            delta: bias.clone(),
            s_a: vec![1.0],
        };
        let (g, b) = fold_scale_into_norm(&gain, &bias, &p).unwrap();
        assert_eq!(g, vec![1.0; 3]);
        assert_eq!(b, vec![0.0; 3]);
    }

    #[test]
    fn norm_fold_two_paths() {
        let mut rng = seeded_rng(4);
        let x = rng.normal_matrix(6, 5, 3.0);
        let gain = rng.uniform_vec(5, 0.5, 1.5);
        let bias = rng.uniform_vec(5, -0.5, 0.5);
        let w = rng.normal_matrix(5, 4, 1.0);
        let b = rng.uniform_vec(4, -1.0, 1.0);
        let p = random_params(&mut rng, 5, 1);

        let normed = layer_norm(&x, &gain, &bias).unwrap();
        let (xt, wt, bt) = smooth_linear(&normed, &w, &b, &p).unwrap();
        let explicit = forward(&xt, &wt, &bt);

        let (g2, b2) = fold_scale_into_norm(&gain, &bias, &p).unwrap();
        let folded = forward(&layer_norm(&x, &g2, &b2).unwrap(), &wt, &bt);
        assert!(explicit.max_abs_diff(&folded).unwrap() < 1e-9);
        assert!(explicit.max_abs_diff(&forward(&normed, &w, &b)).unwrap() < 1e-9);
    }
}
