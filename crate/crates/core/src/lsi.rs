//! Learnable singular value increments.
//!
//! A weight is decomposed once as `W = U·diag(S)·V_h`. Training perturbs the
//! singular values by an increment `I'` and, optionally, adds a learnable
//! `n × n` block `K` to the top-left corner of the diagonal core:
//!
//! ```text
//! Σ' = diag(S + I'),  Σ'[0..n, 0..n] += K,  W' = U·Σ'·V_h
//! ```
//!
//! `W'` is what gets quantized. After training the perturbed weight is
//! quantized once and the factors are dropped ([`fold`]), so inference sees a
//! plain quantized tensor.

use serde::{Deserialize, Serialize};

use crate::error::{LsiError, Result};
use crate::quant::{dequantize, fake_quantize, quantize, QuantConfig, QuantizedTensor};
use crate::tensor::{svd, Matrix, SvdFactors};

/// Square-block size used when none is requested explicitly.
pub const DEFAULT_SQUARE_N: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsiParams {
    pub factors: SvdFactors,
    pub increment: Vec<f64>,
    /// `n × n`; `None` when the block is disabled.
    pub square: Option<Matrix>,
}

impl LsiParams {
    /// Decompose `w`; `square_n` is clamped to the rank dimension, 0 disables the block.
    pub fn capture(w: &Matrix, square_n: usize) -> Result<Self> {
        let factors = svd(w)?;
        let r = factors.rank_dim();
        let n = square_n.min(r);
        Ok(LsiParams {
            increment: vec![0.0; r],
            square: (n > 0).then(|| Matrix::zeros(n, n)),
            factors,
        })
    }

    pub fn rank_dim(&self) -> usize {
        self.factors.rank_dim()
    }

    pub fn square_n(&self) -> usize {
        self.square.as_ref().map_or(0, Matrix::rows)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.factors.u.rows(), self.factors.v_h.cols())
    }

    /// Number of trainable values: `r + n²`.
    pub fn trainable_count(&self) -> usize {
        self.rank_dim() + self.square_n().pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rank_dim();
        let (a, b) = self.shape();
        if self.factors.u.cols() != r || self.factors.v_h.rows() != r || r != a.min(b) {
            return Err(LsiError::Shape("inconsistent SVD factor shapes".into()));
        }
        if self.increment.len() != r {
            return Err(LsiError::Shape(format!(
                "increment length {} for rank dimension {r}",
                self.increment.len()
            )));
        }
        if let Some(k) = &self.square {
            if k.rows() != k.cols() || k.rows() > r {
                return Err(LsiError::Shape(format!(
                    "square block {}x{} for rank dimension {r}",
                    k.rows(),
                    k.cols()
                )));
            }
        }
        Ok(())
    }
}

/// Decompose `w` with a zero increment; see [`LsiParams::capture`].
pub fn capture(w: &Matrix, square_n: usize) -> Result<LsiParams> {
    LsiParams::capture(w, square_n)
}

/// `U · diag(S + I') · V_h`, with `K` added into the leading `n × n` block of the core.
pub fn reconstruct(p: &LsiParams) -> Matrix {
    let f = &p.factors;
    let sigma = Matrix::row_vector(&f.s)
        .add(&Matrix::row_vector(&p.increment))
        .expect("increment length");
    let mut core = f.u.scale_cols(sigma.data()).expect("rank dimension");
    if let Some(k) = &p.square {
        let n = k.rows();
        let lead = f.u.slice(0, f.u.rows(), 0, n).expect("square block fits");
        let uk = lead.matmul(k).expect("square block shape");
        core = add_left_block(&core, &uk);
    }
    core.matmul(&f.v_h).expect("rank dimension")
}

/// `m` with `block` added into its leading columns.
pub(crate) fn add_left_block(m: &Matrix, block: &Matrix) -> Matrix {
    let mut out = m.clone();
    let n = block.cols();
    for r in 0..m.rows() {
        for (o, &b) in out.row_mut(r)[..n].iter_mut().zip(block.row(r)) {
            *o += b;
        }
    }
    out
}

/// Fake-quantize the perturbed weight. Qparams are taken from the perturbed
/// weight, so they move with `I'` and `K`.
pub fn lsi_fake_quantize(p: &LsiParams, cfg: &QuantConfig) -> Result<Matrix> {
    fake_quantize(&reconstruct(p), cfg)
}

/// Bake the increment into the weight and quantize it.
pub fn fold(p: &LsiParams, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    quantize(&reconstruct(p), cfg)
}

/// Fraction of a layer's weights that are trainable under LSI.
pub fn trainable_fraction(rows: usize, cols: usize, square_n: usize) -> f64 {
    let r = rows.min(cols);
    let n = square_n.min(r);
    (r + n * n) as f64 / (rows * cols) as f64
}

/// Mean distance from each entry to its quantized value, in units of the
/// entry's grid step.
pub fn mean_grid_distance(w: &Matrix, cfg: &QuantConfig) -> Result<f64> {
    let q = quantize(w, cfg)?;
    let wq = dequantize(&q);
    let cols = w.cols();
    let mut acc = 0.0;
    for r in 0..w.rows() {
        for c in 0..cols {
            let s = q.scales[cfg.group_of(cols, r, c)];
            acc += (w.get(r, c) - wq.get(r, c)).abs() / s;
        }
    }
    Ok(acc / w.len() as f64)
}
