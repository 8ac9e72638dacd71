//! Uniform affine quantization with per-tensor, per-channel and group-wise
//! granularity, learnable weight clipping, and fake quantization.
//!
//! Weights follow the `Y = X·W` convention: `W` is `in × out`, a channel is
//! an output column, and a group is `g` consecutive input rows of one column.
//! Group ids are laid out as `(row / g) * cols + col`.

use serde::{Deserialize, Serialize};

use crate::error::{LsiError, Result};
use crate::tensor::Matrix;

/// Logit whose sigmoid is `1 - 1e-4`; the initial clipping strength.
pub const CLIP_LOGIT_INIT: f64 = 9.210240366975849;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel,
    Group(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantTarget {
    Weight,
    Activation,
}

/// Learnable clipping logits, one `(gamma, beta)` pair per group.
///
/// The upper bound of a group is `sigmoid(gamma) * max` and the lower bound
/// `sigmoid(beta) * min`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipLogits {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ClipLogits {
    pub fn init(groups: usize) -> Self {
        ClipLogits {
            gamma: vec![CLIP_LOGIT_INIT; groups],
            beta: vec![CLIP_LOGIT_INIT; groups],
        }
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    pub granularity: Granularity,
    pub target: QuantTarget,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<ClipLogits>,
}

impl QuantConfig {
    pub fn per_channel(bits: u8) -> Self {
        QuantConfig {
            bits,
            granularity: Granularity::PerChannel,
            target: QuantTarget::Weight,
            clip: None,
        }
    }

    pub fn group(bits: u8, size: usize) -> Self {
        QuantConfig {
            bits,
            granularity: Granularity::Group(size),
            target: QuantTarget::Weight,
            clip: None,
        }
    }

    pub fn activation(bits: u8) -> Self {
        QuantConfig {
            bits,
            granularity: Granularity::PerTensor,
            target: QuantTarget::Activation,
            clip: None,
        }
    }

    /// Weight config for an optional group size (`None` or `Some(0)` means per-channel).
    pub fn weight(bits: u8, group: Option<usize>) -> Self {
        match group {
            Some(g) if g > 0 => Self::group(bits, g),
            _ => Self::per_channel(bits),
        }
    }

    pub fn with_clip(mut self, clip: ClipLogits) -> Self {
        self.clip = Some(clip);
        self
    }

    pub fn without_clip(&self) -> Self {
        QuantConfig {
            clip: None,
            ..self.clone()
        }
    }

    #[inline]
    pub fn levels(&self) -> f64 {
        ((1u32 << self.bits) - 1) as f64
    }

    pub fn group_count(&self, rows: usize, cols: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel => cols,
            Granularity::Group(g) => (rows / g.max(1)) * cols,
        }
    }

    #[inline]
    pub fn group_of(&self, cols: usize, r: usize, c: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerChannel => c,
            Granularity::Group(g) => (r / g) * cols + c,
        }
    }

    /// Check the config against a tensor shape.
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(LsiError::Config(format!("bit width {} outside [2, 8]", self.bits)));
        }
        match (self.target, self.granularity) {
            (QuantTarget::Activation, Granularity::PerTensor) => {}
            (QuantTarget::Activation, _) => {
                return Err(LsiError::Config("activations use per-tensor granularity".into()))
            }
            (QuantTarget::Weight, Granularity::PerTensor) => {
                return Err(LsiError::Config(
                    "weights use per-channel or group granularity".into(),
                ))
            }
            (QuantTarget::Weight, Granularity::Group(g)) => {
                if g == 0 || rows % g != 0 {
                    return Err(LsiError::Shape(format!(
                        "group size {g} does not divide input dimension {rows}"
                    )));
                }
            }
            (QuantTarget::Weight, Granularity::PerChannel) => {}
        }
        if let Some(clip) = &self.clip {
            let n = self.group_count(rows, cols);
            if clip.gamma.len() != n || clip.beta.len() != n {
                return Err(LsiError::Shape(format!(
                    "clip logits for {} groups, tensor has {n}",
                    clip.gamma.len()
                )));
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}

/// Scale and zero point of one quantization group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QParams {
    pub scale: f64,
    pub zero: f64,
}

/// Per-group statistics kept for the backward pass.
#[derive(Clone, Copy, Debug)]
pub(crate) struct GroupStats {
    pub min: f64,
    pub max: f64,
    pub argmin: usize,
    pub argmax: usize,
    pub sig_hi: f64,
    pub sig_lo: f64,
    pub qp: QParams,
    pub degenerate: bool,
}

fn qparams_from_range(lo: f64, hi: f64, levels: f64) -> (QParams, bool) {
    if hi > lo {
        let scale = (hi - lo) / levels;
        let zero = round_half_even(-lo / scale);
        (QParams { scale: stable_scale(scale, zero, levels), zero }, false)
    } else {
        // All-equal group: a one-level grid that hits the value exactly.
        let c = if hi == lo { hi } else { 0.5 * (hi + lo) };
        let qp = if c > 0.0 {
            QParams { scale: c, zero: 0.0 }
        } else if c < 0.0 {
            QParams { scale: -c, zero: 1.0 }
        } else {
            QParams { scale: 1.0, zero: 0.0 }
        };
        (qp, true)
    }
}

/// Nudges `scale` by a few ulps so that the range spanned by its own grid,
/// `(levels - zero)·s − (−zero)·s`, divides back to exactly `s`. Re-quantizing
/// a fake-quantized group then reproduces the same grid bit for bit. Large
/// `|zero|` can push the nearest such scale a few hundred ulps away.
fn stable_scale(scale: f64, zero: f64, levels: f64) -> f64 {
    let span = |s: f64| ((levels - zero) * s - (0.0 - zero) * s) / levels;
    if span(scale) == scale {
        return scale;
    }
    let bits = scale.to_bits();
    for k in 1..=4096u64 {
        for cand in [f64::from_bits(bits + k), f64::from_bits(bits - k)] {
            if span(cand) == cand && round_half_even(zero * cand / cand) == zero {
                return cand;
            }
        }
    }
    scale
}

/// Scale and zero point for a single group of values.
pub fn compute_qparams(group: &[f64], bits: u8, clip: Option<(f64, f64)>) -> Result<QParams> {
    if group.is_empty() {
        return Err(LsiError::Domain("cannot compute qparams of an empty group".into()));
    }
    if group.iter().any(|x| !x.is_finite()) {
        return Err(LsiError::Domain("non-finite value in quantization group".into()));
    }
    let min = group.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = group.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (sh, sl) = clip.map_or((1.0, 1.0), |(g, b)| (sigmoid(g), sigmoid(b)));
    let levels = ((1u32 << bits) - 1) as f64;
    Ok(qparams_from_range(sl * min, sh * max, levels).0)
}

/// Single pass over `w` collecting per-group ranges and qparams.
pub(crate) fn group_stats(w: &Matrix, cfg: &QuantConfig) -> Vec<GroupStats> {
    let (rows, cols) = w.shape();
    let n = cfg.group_count(rows, cols);
    let mut stats = vec![
        GroupStats {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            argmin: 0,
            argmax: 0,
            sig_hi: 1.0,
            sig_lo: 1.0,
            qp: QParams { scale: 1.0, zero: 0.0 },
            degenerate: false,
        };
        n
    ];
    let data = w.data();
    for r in 0..rows {
        for c in 0..cols {
            let idx = r * cols + c;
            let x = data[idx];
            let st = &mut stats[cfg.group_of(cols, r, c)];
            // Strict comparisons keep the lowest flat index on ties.
            if x < st.min {
                st.min = x;
                st.argmin = idx;
            }
            if x > st.max {
                st.max = x;
                st.argmax = idx;
            }
        }
    }
    let levels = cfg.levels();
    for (gi, st) in stats.iter_mut().enumerate() {
        if let Some(clip) = &cfg.clip {
            st.sig_hi = sigmoid(clip.gamma[gi]);
            st.sig_lo = sigmoid(clip.beta[gi]);
        }
        let (qp, degenerate) = qparams_from_range(st.sig_lo * st.min, st.sig_hi * st.max, levels);
        st.qp = qp;
        st.degenerate = degenerate;
    }
    stats
}

/// Integer codes plus per-group scale and zero point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<u8>,
    pub scales: Vec<f64>,
    pub zeros: Vec<f64>,
    pub config: QuantConfig,
}

impl QuantizedTensor {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Structural consistency check used after deserialization.
    pub fn validate(&self) -> Result<()> {
        self.config.validate(self.rows, self.cols)?;
        let n = self.config.group_count(self.rows, self.cols);
        if self.codes.len() != self.rows * self.cols {
            return Err(LsiError::Shape("code buffer length does not match shape".into()));
        }
        if self.scales.len() != n || self.zeros.len() != n {
            return Err(LsiError::Shape("qparam count does not match group count".into()));
        }
        let max_code = (1u32 << self.config.bits) - 1;
        if self.codes.iter().any(|&c| c as u32 > max_code) {
            return Err(LsiError::Domain("code outside [0, 2^k - 1]".into()));
        }
        Ok(())
    }
}

pub fn quantize(w: &Matrix, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    let (rows, cols) = w.shape();
    cfg.validate(rows, cols)?;
    if w.is_empty() {
        return Err(LsiError::Domain("cannot quantize an empty tensor".into()));
    }
    if !w.is_finite() {
        return Err(LsiError::Domain("non-finite value in tensor to quantize".into()));
    }
    let stats = group_stats(w, cfg);
    let levels = cfg.levels();
    let data = w.data();
    let mut codes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let qp = stats[cfg.group_of(cols, r, c)].qp;
            let v = round_half_even(data[r * cols + c] / qp.scale) + qp.zero;
            codes.push(v.clamp(0.0, levels) as u8);
        }
    }
    Ok(QuantizedTensor {
        rows,
        cols,
        codes,
        scales: stats.iter().map(|s| s.qp.scale).collect(),
        zeros: stats.iter().map(|s| s.qp.zero).collect(),
        config: cfg.clone(),
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Matrix {
    let cfg = &q.config;
    Matrix::from_fn(q.rows, q.cols, |r, c| {
        let g = cfg.group_of(q.cols, r, c);
        (q.codes[r * q.cols + c] as f64 - q.zeros[g]) * q.scales[g]
    })
}

/// `dequantize(quantize(w))`.
pub fn fake_quantize(w: &Matrix, cfg: &QuantConfig) -> Result<Matrix> {
    Ok(dequantize(&quantize(w, cfg)?))
}

/// Per-tensor dynamic fake quantization of activations; a no-op above 8 bits.
pub fn quantize_activation(x: &Matrix, bits: u8) -> Result<Matrix> {
    if bits > 8 {
        return Ok(x.clone());
    }
    fake_quantize(x, &QuantConfig::activation(bits))
}

/// Everything the backward pass of fake quantization needs.
#[derive(Clone, Debug)]
pub(crate) struct FakeQuantTrace {
    pub stats: Vec<GroupStats>,
    /// `round(w/s) - w/s` per element.
    pub residual: Vec<f64>,
    /// -1 clamped low, +1 clamped high, 0 inside.
    pub clamp: Vec<i8>,
}

/// Rounding residuals and clamp pattern of one fake-quantization node.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenRounding {
    pub residual: Vec<f64>,
    pub clamp: Vec<i8>,
}

/// Fake quantization that also records the trace for backward.
///
/// With `frozen`, rounding is replaced by adding the stored residuals and the
/// stored clamp pattern is reused, which turns the forward into the smooth
/// surrogate the STE gradient is the exact derivative of. Without it the
/// output is bit-identical to [`fake_quantize`].
pub(crate) fn fake_quantize_traced(
    w: &Matrix,
    cfg: &QuantConfig,
    frozen: Option<&FrozenRounding>,
) -> Result<(Matrix, FakeQuantTrace)> {
    let (rows, cols) = w.shape();
    cfg.validate(rows, cols)?;
    if w.is_empty() {
        return Err(LsiError::Domain("cannot quantize an empty tensor".into()));
    }
    if !w.is_finite() {
        return Err(LsiError::Domain("non-finite value in tensor to quantize".into()));
    }
    let stats = group_stats(w, cfg);
    let levels = cfg.levels();
    let data = w.data();
    let mut out = Vec::with_capacity(rows * cols);
    let mut residual = Vec::with_capacity(rows * cols);
    let mut clamp = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let idx = r * cols + c;
            let qp = stats[cfg.group_of(cols, r, c)].qp;
            let t = data[idx] / qp.scale;
            let (v, res) = match frozen {
                None => {
                    let rt = round_half_even(t);
                    (rt + qp.zero, rt - t)
                }
                Some(fr) => (t + fr.residual[idx] + qp.zero, fr.residual[idx]),
            };
            let flag = match frozen {
                None if v < 0.0 => -1,
                None if v > levels => 1,
                None => 0,
                Some(fr) => fr.clamp[idx],
            };
            let vc = match flag {
                -1 => 0.0,
                1 => levels,
                _ => v,
            };
            let code = match frozen {
                None => vc as u8 as f64,
                Some(_) => vc,
            };
            out.push((code - qp.zero) * qp.scale);
            residual.push(res);
            clamp.push(flag);
        }
    }
    Ok((
        Matrix::from_vec(rows, cols, out)?,
        FakeQuantTrace {
            stats,
            residual,
            clamp,
        },
    ))
}

/// Gradients of fake quantization with respect to its input and clip logits.
pub(crate) struct FakeQuantGrads {
    pub input: Matrix,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Straight-through backward of [`fake_quantize_traced`].
///
/// Inside the clamp range the input gradient passes straight through; clamped
/// entries get zero direct gradient when `ste_clip` is set. The scale path is
/// differentiated with the rounding residual held constant, and reaches the
/// inputs through the min/max entries and the clip logits through the sigmoid.
pub(crate) fn fake_quantize_backward(
    upstream: &Matrix,
    w: &Matrix,
    cfg: &QuantConfig,
    trace: &FakeQuantTrace,
    ste_clip: bool,
) -> FakeQuantGrads {
    let (rows, cols) = w.shape();
    let levels = cfg.levels();
    let n = trace.stats.len();
    let g = upstream.data();
    let mut dw = vec![0.0; rows * cols];
    let mut dscale = vec![0.0; n];
    for r in 0..rows {
        for c in 0..cols {
            let idx = r * cols + c;
            let gi = cfg.group_of(cols, r, c);
            let st = &trace.stats[gi];
            if !ste_clip {
                dw[idx] += g[idx];
                continue;
            }
            match trace.clamp[idx] {
                0 => {
                    dw[idx] += g[idx];
                    dscale[gi] += g[idx] * trace.residual[idx];
                }
                -1 => dscale[gi] += g[idx] * (0.0 - st.qp.zero),
                _ => dscale[gi] += g[idx] * (levels - st.qp.zero),
            }
        }
    }
    let mut dgamma = vec![0.0; n];
    let mut dbeta = vec![0.0; n];
    if ste_clip {
        for (gi, st) in trace.stats.iter().enumerate() {
            if st.degenerate {
                continue;
            }
            let dhi = dscale[gi] / levels;
            let dlo = -dscale[gi] / levels;
            dw[st.argmax] += dhi * st.sig_hi;
            dw[st.argmin] += dlo * st.sig_lo;
            if cfg.clip.is_some() {
                dgamma[gi] = dhi * st.max * st.sig_hi * (1.0 - st.sig_hi);
                dbeta[gi] = dlo * st.min * st.sig_lo * (1.0 - st.sig_lo);
            }
        }
    }
    FakeQuantGrads {
        input: Matrix::from_vec(rows, cols, dw).expect("shape"),
        gamma: dgamma,
        beta: dbeta,
    }
}

/// Direct straight-through gradient of fake quantization.
///
/// Identity where the pre-clamp value `round(w/s) + z` lies in `[0, 2^k - 1]`,
/// zero where it was clamped (`ste_clip`), plain identity otherwise.
pub fn ste_backward(upstream: &Matrix, w: &Matrix, cfg: &QuantConfig, ste_clip: bool) -> Result<Matrix> {
    if upstream.shape() != w.shape() {
        return Err(LsiError::Shape("upstream gradient shape differs from input".into()));
    }
    if !ste_clip {
        return Ok(upstream.clone());
    }
    let (_, trace) = fake_quantize_traced(w, cfg, None)?;
    let data = upstream
        .data()
        .iter()
        .zip(&trace.clamp)
        .map(|(&g, &f)| if f == 0 { g } else { 0.0 })
        .collect();
    Matrix::from_vec(w.rows(), w.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    fn act(bits: u8) -> QuantConfig {
        QuantConfig::activation(bits)
    }

    #[test]
    fn symmetric_unit_range_8bit() {
        let qp = compute_qparams(&[-1.0, 0.25, 1.0], 8, None).unwrap();
        assert_eq!(qp.scale, 2.0 / 255.0);
        assert_eq!(qp.zero, 128.0);
    }

    #[test]
    fn constant_group_is_exact() {
        for &c in &[0.0, 1.0, 0.37, -2.5, 1e-7] {
            for bits in 2..=8 {
                let w = Matrix::filled(3, 4, c);
                let q = quantize(&w, &QuantConfig::per_channel(bits)).unwrap();
                assert_eq!(dequantize(&q), w, "c={c} bits={bits}");
            }
        }
        let qp = compute_qparams(&[0.0; 5], 4, None).unwrap();
        assert_eq!((qp.scale, qp.zero), (1.0, 0.0));
        let qp = compute_qparams(&[1.0; 5], 4, None).unwrap();
        assert_eq!((qp.scale, qp.zero), (1.0, 0.0));
    }

    #[test]
    fn exact_grid_zero_to_fifteen() {
        let vals: Vec<f64> = (0..16).map(|x| x as f64).collect();
        let qp = compute_qparams(&vals, 4, None).unwrap();
        assert_eq!((qp.scale, qp.zero), (1.0, 0.0));
        let w = Matrix::from_vec(1, 16, vals.clone()).unwrap();
        let q = quantize(&w, &act(4)).unwrap();
        assert_eq!(q.codes, (0..16).collect::<Vec<u8>>());
        assert_eq!(dequantize(&q), w);
        assert_eq!(fake_quantize(&w, &act(4)).unwrap(), w);
    }

    #[test]
    fn zero_matrix_codes_equal_zero_point() {
        let w = Matrix::zeros(4, 4);
        let q = quantize(&w, &QuantConfig::per_channel(4)).unwrap();
        for (i, &code) in q.codes.iter().enumerate() {
            assert_eq!(code as f64, q.zeros[i % 4]);
        }
        assert_eq!(dequantize(&q), w);
    }

    #[test]
    fn two_bit_enumeration() {
        let w = Matrix::row_vector(&[-1.5, 0.3, 0.7, 2.1]);
        let cfg = act(2);
        let q = quantize(&w, &cfg).unwrap();
        let (s, z) = (q.scales[0], q.zeros[0]);
        // Nearest grid level among all four codes.
        for (i, &x) in w.data().iter().enumerate() {
            let best = (0..4u8)
                .min_by(|&a, &b| {
                    let ea = (x - (a as f64 - z) * s).abs();
                    let eb = (x - (b as f64 - z) * s).abs();
                    ea.total_cmp(&eb)
                })
                .unwrap();
            assert_eq!(q.codes[i], best);
        }
        assert_eq!(q.codes, vec![0, 1, 2, 3]);
    }

    #[test]
    fn clipped_values_saturate() {
        let w = Matrix::row_vector(&[-4.0, -1.0, 0.0, 1.0, 4.0]);
        let clip = ClipLogits {
            gamma: vec![0.0],
            beta: vec![0.0],
        };
        let cfg = act(4).with_clip(clip);
        let q = quantize(&w, &cfg).unwrap();
        assert_eq!(q.codes[0], 0);
        assert_eq!(q.codes[4], 15);
    }

    #[test]
    fn half_step_bound() {
        let mut rng = seeded_rng(3);
        let w = rng.uniform_matrix(16, 8, -1.0, 1.0);
        let cfg = QuantConfig::per_channel(8);
        let q = quantize(&w, &cfg).unwrap();
        let wt = dequantize(&q);
        for r in 0..16 {
            for c in 0..8 {
                let d = (w.get(r, c) - wt.get(r, c)).abs();
                assert!(d <= q.scales[c] / 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn fake_quantize_idempotent() {
        let mut rng = seeded_rng(12);
        for bits in 2..=8 {
            let w = rng.normal_matrix(8, 6, 1.0);
            let cfg = QuantConfig::group(bits, 4);
            let once = fake_quantize(&w, &cfg).unwrap();
            let twice = fake_quantize(&once, &cfg).unwrap();
            assert_eq!(once, twice);
            let again = quantize(&once, &cfg).unwrap();
            assert_eq!(again.codes, quantize(&w, &cfg).unwrap().codes);
        }
    }

    #[test]
    fn three_values_two_bits() {
        // Three distinct values on a 4-level grid.
        let w = Matrix::row_vector(&[-0.8, 0.1, 0.5]);
        let out = fake_quantize(&w, &act(2)).unwrap();
        let s = 1.3 / 3.0;
        let z = (0.8_f64 / s).round_ties_even();
        for (&x, &y) in w.data().iter().zip(out.data()) {
            let best = (0..4)
                .map(|c| (c as f64 - z) * s)
                .min_by(|a, b| (x - a).abs().total_cmp(&(x - b).abs()))
                .unwrap();
            assert!((best - y).abs() < 1e-15);
        }
    }

    #[test]
    fn activation_paths() {
        let x = Matrix::filled(3, 3, 0.7);
        assert_eq!(quantize_activation(&x, 4).unwrap(), x);
        let mut rng = seeded_rng(5);
        let y = rng.normal_matrix(5, 5, 1.0);
        assert_eq!(quantize_activation(&y, 16).unwrap(), y);
        let yq = quantize_activation(&y, 4).unwrap();
        let qp = compute_qparams(y.data(), 4, None).unwrap();
        assert!(y.max_abs_diff(&yq).unwrap() <= qp.scale / 2.0 + 1e-12);
    }

    #[test]
    fn config_validation() {
        let w = Matrix::zeros(6, 4);
        assert!(matches!(
            quantize(&w, &QuantConfig::group(4, 4)),
            Err(LsiError::Shape(_))
        ));
        assert!(quantize(&w, &QuantConfig::per_channel(1)).is_err());
        assert!(quantize(&w, &QuantConfig::per_channel(9)).is_err());
        let mut bad = QuantConfig::per_channel(4);
        bad.granularity = Granularity::PerTensor;
        assert!(quantize(&w, &bad).is_err());
        let mut bad = act(4);
        bad.granularity = Granularity::PerChannel;
        assert!(quantize(&w, &bad).is_err());
        assert!(compute_qparams(&[], 4, None).is_err());
    }

    #[test]
    fn ste_masks() {
        let w = Matrix::row_vector(&[-3.0, -0.5, 0.2, 0.4, 3.0]);
        let cfg = act(3).with_clip(ClipLogits {
            gamma: vec![-1.0],
            beta: vec![-1.0],
        });
        let up = Matrix::filled(1, 5, 1.0);
        let g = ste_backward(&up, &w, &cfg, true).unwrap();
        assert_eq!(g.data()[0], 0.0);
        assert_eq!(g.data()[4], 0.0);
        assert_eq!(&g.data()[1..4], &[1.0, 1.0, 1.0]);
        assert_eq!(ste_backward(&up, &w, &cfg, false).unwrap(), up);
        let inside = Matrix::row_vector(&[0.1, 0.2, 0.3]);
        let g = ste_backward(&Matrix::filled(1, 3, 2.0), &inside, &act(4), true).unwrap();
        assert_eq!(g, Matrix::filled(1, 3, 2.0));
    }

    #[test]
    fn traced_matches_plain() {
        let mut rng = seeded_rng(21);
        let w = rng.normal_matrix(8, 8, 1.0);
        let cfg = QuantConfig::group(3, 4).with_clip(ClipLogits::init(16));
        let (fq, _) = fake_quantize_traced(&w, &cfg, None).unwrap();
        assert_eq!(fq, fake_quantize(&w, &cfg).unwrap());
    }
}
