//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Forward values are computed with the same kernels the rest of the crate
//! uses, so a graph evaluated without gradients is bit-identical to the plain
//! functions it mirrors. Fake quantization uses the straight-through rule; in
//! [`ResidualMode::Replay`] the rounding residuals recorded by an earlier pass
//! are added instead of rounding, which makes the forward the smooth surrogate
//! whose exact derivative the STE backward computes. Finite-difference checks
//! run in that mode.

use crate::error::{LsiError, Result};
use crate::nn;
use crate::quant::{
    fake_quantize_backward, fake_quantize_traced, ClipLogits, FakeQuantTrace, FrozenRounding, QuantConfig,
};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    ScaleCols(Var, Var),
    DivCols(Var, Var),
    Exp(Var),
    Neg(Var),
    Slice { src: Var, r0: usize, c0: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    AddLeftBlock(Var, Var),
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Matrix, inv_std: Vec<f64> },
    Gelu(Var),
    CausalSoftmax { x: Var, scale: f64 },
    FakeQuant {
        x: Var,
        clip: Option<(Var, Var)>,
        cfg: QuantConfig,
        trace: FakeQuantTrace,
    },
    Mse(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix },
    Gather { table: Var, ids: Vec<usize> },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// How fake-quantization nodes treat rounding.
#[derive(Clone, Debug, Default)]
pub enum ResidualMode {
    /// Round normally.
    #[default]
    Normal,
    /// Round normally and keep each node's residuals and clamp pattern.
    Record,
    /// Add the stored residuals instead of rounding and reuse the stored clamp
    /// pattern, in node creation order.
    Replay(Vec<FrozenRounding>),
}

pub struct Tape {
    nodes: Vec<Node>,
    ste_clip: bool,
    residuals: ResidualMode,
    recorded: Vec<FrozenRounding>,
    replay_cursor: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(true)
    }
}

impl Tape {
    pub fn new(ste_clip: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            ste_clip,
            residuals: ResidualMode::Normal,
            recorded: Vec::new(),
            replay_cursor: 0,
        }
    }

    pub fn with_residuals(mut self, mode: ResidualMode) -> Self {
        self.residuals = mode;
        self
    }

    /// Residuals captured in [`ResidualMode::Record`].
    pub fn take_recorded(&mut self) -> Vec<FrozenRounding> {
        std::mem::take(&mut self.recorded)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn row_constant(&mut self, v: &[f64]) -> Var {
        self.constant(Matrix::row_vector(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_nt(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// `a` plus the `1 × cols` row vector `v` on every row.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let value = self.value(a).add_row_vector(self.value(v).data())?;
        let ng = self.ng(a) || self.ng(v);
        Ok(self.push(value, Op::AddRow(a, v), ng))
    }

    /// `diag(v) · a`.
    pub fn scale_rows(&mut self, a: Var, v: Var) -> Result<Var> {
        let value = self.value(a).scale_rows(self.value(v).data())?;
        let ng = self.ng(a) || self.ng(v);
        Ok(self.push(value, Op::ScaleRows(a, v), ng))
    }

    /// `a · diag(v)`.
    pub fn scale_cols(&mut self, a: Var, v: Var) -> Result<Var> {
        let value = self.value(a).scale_cols(self.value(v).data())?;
        let ng = self.ng(a) || self.ng(v);
        Ok(self.push(value, Op::ScaleCols(a, v), ng))
    }

    /// Column `j` of `a` divided by `v[j]`.
    pub fn div_cols(&mut self, a: Var, v: Var) -> Result<Var> {
        let value = self.value(a).div_cols(self.value(v).data())?;
        let ng = self.ng(a) || self.ng(v);
        Ok(self.push(value, Op::DivCols(a, v), ng))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| -x);
        let ng = self.ng(a);
        self.push(value, Op::Neg(a), ng)
    }

    pub fn slice(&mut self, src: Var, r0: usize, nr: usize, c0: usize, nc: usize) -> Result<Var> {
        let value = self.value(src).slice(r0, nr, c0, nc)?;
        let ng = self.ng(src);
        Ok(self.push(value, Op::Slice { src, r0, c0 }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&mats)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_rows(&mats)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// `m` with `block` added into its leading columns.
    pub fn add_left_block(&mut self, m: Var, block: Var) -> Result<Var> {
        let (mv, bv) = (self.value(m), self.value(block));
        if mv.rows() != bv.rows() || bv.cols() > mv.cols() {
            return Err(LsiError::Shape("left block does not fit".into()));
        }
        let value = crate::lsi::add_left_block(mv, bv);
        let ng = self.ng(m) || self.ng(block);
        Ok(self.push(value, Op::AddLeftBlock(m, block), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (normed, inv_std) = nn::normalize_rows(self.value(x));
        let value = normed
            .scale_cols(self.value(gain).data())?
            .add_row_vector(self.value(bias).data())?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(nn::gelu);
        let ng = self.ng(x);
        self.push(value, Op::Gelu(x), ng)
    }

    pub fn causal_softmax(&mut self, x: Var, scale: f64) -> Var {
        let value = nn::causal_softmax(self.value(x), scale);
        let ng = self.ng(x);
        self.push(value, Op::CausalSoftmax { x, scale }, ng)
    }

    /// Fake quantization of `x` under `cfg` (its own clip logits are ignored);
    /// `clip` supplies the `1 × groups` gamma and beta vars when present.
    pub fn fake_quant(&mut self, x: Var, cfg: &QuantConfig, clip: Option<(Var, Var)>) -> Result<Var> {
        let mut cfg = cfg.without_clip();
        if let Some((g, b)) = clip {
            cfg.clip = Some(ClipLogits {
                gamma: self.value(g).data().to_vec(),
                beta: self.value(b).data().to_vec(),
            });
        }
        let frozen = match &self.residuals {
            ResidualMode::Replay(all) => {
                let r = all.get(self.replay_cursor).ok_or_else(|| {
                    LsiError::Config("residual replay ran past the recorded nodes".into())
                })?;
                self.replay_cursor += 1;
                Some(r.clone())
            }
            _ => None,
        };
        let (value, trace) = fake_quantize_traced(self.value(x), &cfg, frozen.as_ref())?;
        if let ResidualMode::Record = self.residuals {
            self.recorded.push(FrozenRounding {
                residual: trace.residual.clone(),
                clamp: trace.clamp.clone(),
            });
        }
        let ng = self.ng(x) || clip.is_some_and(|(g, b)| self.ng(g) || self.ng(b));
        Ok(self.push(value, Op::FakeQuant { x, clip, cfg, trace }, ng))
    }

    /// Mean squared difference, as a `1 × 1` node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = crate::tensor::frobenius_mse(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Matrix::row_vector(&[v]), Op::Mse(a, b), ng))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = nn::cross_entropy(self.value(logits), targets)?;
        let ng = self.ng(logits);
        Ok(self.push(
            Matrix::row_vector(&[loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(LsiError::Domain(format!("row id {bad} outside table of {}", t.rows())));
        }
        let rows: Vec<f64> = ids.iter().flat_map(|&i| t.row(i).to_vec()).collect();
        let value = Matrix::from_vec(ids.len(), t.cols(), rows)?;
        let ng = self.ng(table);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta).expect("gradient shape"),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, matmul_nt(g, val(*b)).expect("shape"));
                }
                if self.ng(*b) {
                    acc(*b, matmul_tn(val(*a), g).expect("shape"));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.ng(*a) {
                    acc(*a, matmul(g, val(*b)).expect("shape"));
                }
                if self.ng(*b) {
                    acc(*b, matmul_tn(g, val(*a)).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::AddRow(a, v) => {
                acc(*a, g.clone());
                if self.ng(*v) {
                    acc(*v, Matrix::row_vector(&g.col_sums()));
                }
            }
            Op::ScaleRows(a, v) => {
                let vv = val(*v).data();
                if self.ng(*a) {
                    acc(*a, g.scale_rows(vv).expect("shape"));
                }
                if self.ng(*v) {
                    let av = val(*a);
                    let gv: Vec<f64> = (0..av.rows())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    acc(*v, Matrix::row_vector(&gv));
                }
            }
            Op::ScaleCols(a, v) => {
                let vv = val(*v).data();
                if self.ng(*a) {
                    acc(*a, g.scale_cols(vv).expect("shape"));
                }
                if self.ng(*v) {
                    let gv = g.hadamard(val(*a)).expect("shape").col_sums();
                    acc(*v, Matrix::row_vector(&gv));
                }
            }
            Op::DivCols(a, v) => {
                let vv = val(*v).data();
                if self.ng(*a) {
                    acc(*a, g.div_cols(vv).expect("shape"));
                }
                if self.ng(*v) {
                    let s = g.hadamard(val(*a)).expect("shape").col_sums();
                    let gv: Vec<f64> = s.iter().zip(vv).map(|(s, d)| -s / (d * d)).collect();
                    acc(*v, Matrix::row_vector(&gv));
                }
            }
            Op::Exp(a) => acc(*a, g.hadamard(&node.value).expect("shape")),
            Op::Neg(a) => acc(*a, g.scale(-1.0)),
            Op::Slice { src, r0, c0 } => {
                let sv = val(*src);
                let mut full = Matrix::zeros(sv.rows(), sv.cols());
                for r in 0..g.rows() {
                    full.row_mut(r0 + r)[*c0..c0 + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*src, full);
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.ng(p) {
                        acc(p, g.slice(0, g.rows(), c0, w).expect("shape"));
                    }
                    c0 += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let h = val(p).rows();
                    if self.ng(p) {
                        acc(p, g.slice(r0, h, 0, g.cols()).expect("shape"));
                    }
                    r0 += h;
                }
            }
            Op::AddLeftBlock(m, block) => {
                acc(*m, g.clone());
                if self.ng(*block) {
                    let n = val(*block).cols();
                    acc(*block, g.slice(0, g.rows(), 0, n).expect("shape"));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                if self.ng(*gain) {
                    let gg = g.hadamard(normed).expect("shape").col_sums();
                    acc(*gain, Matrix::row_vector(&gg));
                }
                if self.ng(*bias) {
                    acc(*bias, Matrix::row_vector(&g.col_sums()));
                }
                if self.ng(*x) {
                    let gain_v = val(*gain).data();
                    let n = g.cols() as f64;
                    let mut gx = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let gn: Vec<f64> = g.row(r).iter().zip(gain_v).map(|(a, b)| a * b).collect();
                        let nr = normed.row(r);
                        let mean_g = gn.iter().sum::<f64>() / n;
                        let mean_gn = gn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((o, &gi), &ni) in gx.row_mut(r).iter_mut().zip(&gn).zip(nr) {
                            *o = inv_std[r] * (gi - mean_g - ni * mean_gn);
                        }
                    }
                    acc(*x, gx);
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                acc(*x, g.zip_map(xv, |gi, xi| gi * nn::gelu_grad(xi)).expect("shape"));
            }
            Op::CausalSoftmax { x, scale } => {
                let p = &node.value;
                let mut gx = Matrix::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let dot: f64 = g.row(r).iter().zip(p.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, &gi), &pi) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(p.row(r)) {
                        *o = scale * pi * (gi - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::FakeQuant { x, clip, cfg, trace } => {
                let fg = fake_quantize_backward(g, val(*x), cfg, trace, self.ste_clip);
                acc(*x, fg.input);
                if let Some((gv, bv)) = clip {
                    acc(*gv, Matrix::row_vector(&fg.gamma));
                    acc(*bv, Matrix::row_vector(&fg.beta));
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let k = 2.0 * g.get(0, 0) / av.len() as f64;
                let d = av.zip_map(bv, |x, y| k * (x - y)).expect("shape");
                if self.ng(*b) {
                    acc(*b, d.scale(-1.0));
                }
                acc(*a, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = g.get(0, 0) / targets.len().max(1) as f64;
                let mut gl = probs.scale(k);
                for (r, &t) in targets.iter().enumerate() {
                    let v = gl.get(r, t);
                    gl.set(r, t, v - k);
                }
                acc(*logits, gl);
            }
            Op::Gather { table, ids } => {
                let tv = val(*table);
                let mut gt = Matrix::zeros(tv.rows(), tv.cols());
                for (r, &i) in ids.iter().enumerate() {
                    for (o, &x) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*table, gt);
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of a node; zeros of the right shape are not materialized,
    /// so `None` means "no dependence".
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    /// Central differences of `f` around every entry of `x0`.
    fn numeric(x0: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut out = Matrix::zeros(x0.rows(), x0.cols());
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn check(x0: &Matrix, build: &dyn Fn(&mut Tape, Var) -> Var) {
        let mut t = Tape::default();
        let x = t.param(x0.clone());
        let y = build(&mut t, x);
        let g = t.backward(y).get(x).cloned().unwrap_or(Matrix::zeros(x0.rows(), x0.cols()));
        let f = |m: &Matrix| {
            let mut t = Tape::default();
            let x = t.constant(m.clone());
            let y = build(&mut t, x);
            t.value(y).get(0, 0)
        };
        let n = numeric(x0, &f);
        let err = g.max_abs_diff(&n).unwrap();
        assert!(err < 1e-6 * (1.0 + n.max_abs()), "analytic {g:?} numeric {n:?}");
    }

    #[test]
    fn elementary_ops() {
        let mut rng = seeded_rng(1);
        let a = rng.normal_matrix(4, 3, 1.0);
        let b = rng.normal_matrix(3, 5, 1.0);
        let v = rng.uniform_matrix(1, 3, 0.5, 2.0);
        let target = rng.normal_matrix(4, 5, 1.0);
        check(&a, &|t, x| {
            let bb = t.constant(b.clone());
            let y = t.matmul(x, bb).unwrap();
            let tt = t.constant(target.clone());
            t.mse(y, tt).unwrap()
        });
        check(&v, &|t, x| {
            let aa = t.constant(a.clone());
            let s = t.scale_cols(aa, x).unwrap();
            let d = t.div_cols(s, x).unwrap();
            let e = t.exp(x);
            let d2 = t.div_cols(d, e).unwrap();
            let z = t.constant(Matrix::zeros(4, 3));
            t.mse(d2, z).unwrap()
        });
        check(&a, &|t, x| {
            let vv = t.constant(Matrix::row_vector(&[0.5, -1.0, 2.0, 1.5]));
            let s = t.scale_rows(x, vv).unwrap();
            let sl = t.slice(s, 1, 2, 0, 2).unwrap();
            let sl2 = t.slice(s, 0, 2, 1, 2).unwrap();
            let c = t.concat_rows(&[sl, sl2]).unwrap();
            let c2 = t.concat_cols(&[c, c]).unwrap();
            let z = t.constant(Matrix::filled(4, 4, 0.3));
            t.mse(c2, z).unwrap()
        });
    }

    #[test]
    fn nonlinear_ops() {
        let mut rng = seeded_rng(2);
        let x0 = rng.normal_matrix(5, 6, 1.0);
        let gain = rng.uniform_matrix(1, 6, 0.5, 1.5);
        let target = rng.normal_matrix(5, 6, 1.0);
        check(&x0, &|t, x| {
            let g = t.constant(gain.clone());
            let b = t.constant(Matrix::row_vector(&[0.1; 6]));
            let n = t.layer_norm(x, g, b).unwrap();
            let a = t.gelu(n);
            let tt = t.constant(target.clone());
            t.mse(a, tt).unwrap()
        });
        check(&gain, &|t, g| {
            let x = t.constant(x0.clone());
            let b = t.constant(Matrix::row_vector(&[0.1; 6]));
            let n = t.layer_norm(x, g, b).unwrap();
            let tt = t.constant(target.clone());
            t.mse(n, tt).unwrap()
        });
        check(&x0, &|t, x| {
            let k = t.constant(target.clone());
            let s = t.matmul_nt(x, k).unwrap();
            let p = t.causal_softmax(s, 0.7);
            let z = t.constant(Matrix::filled(5, 5, 0.2));
            t.mse(p, z).unwrap()
        });
        check(&x0, &|t, x| t.cross_entropy(x, &[0, 5, 2, 3, 1]).unwrap());
        let table = rng.normal_matrix(4, 3, 1.0);
        check(&table, &|t, tab| {
            let rows = t.gather(tab, &[1, 3, 1]).unwrap();
            let z = t.constant(Matrix::zeros(3, 3));
            t.mse(rows, z).unwrap()
        });
    }

    #[test]
    fn residual_replay_restores_value() {
        let x0 = seeded_rng(3).normal_matrix(6, 4, 1.0);
        let cfg = QuantConfig::per_channel(3);
        let mut t = Tape::new(true).with_residuals(ResidualMode::Record);
        let x = t.constant(x0.clone());
        let q = t.fake_quant(x, &cfg, None).unwrap();
        let recorded = t.take_recorded();
        let base = t.value(q).clone();
        let mut t2 = Tape::new(true).with_residuals(ResidualMode::Replay(recorded));
        let x = t2.constant(x0);
        let q2 = t2.fake_quant(x, &cfg, None).unwrap();
        assert!(t2.value(q2).max_abs_diff(&base).unwrap() < 1e-12);
    }
}
