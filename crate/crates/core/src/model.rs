//! Toy decoder-only transformer used to exercise every quantization path.
//!
//! Layout: token embedding plus a fixed sinusoidal position table, then
//! pre-norm blocks (`x + attn(norm1(x))`, then `x + mlp(norm2(x))`), a final
//! norm and an output head. Weights use the `y = x·W + b` convention, so a
//! weight is `inputs × outputs` and quantization groups run down columns.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{LsiError, Result};
use crate::lsi::{self, LsiParams};
use crate::nn;
use crate::quant::{dequantize, quantize, ClipLogits, Granularity, QuantConfig, QuantizedTensor};
use crate::smooth::check_positive;
use crate::tensor::{seeded_rng, Matrix, RandomStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Norm {
    pub fn identity(width: usize) -> Self {
        Norm {
            gain: vec![1.0; width],
            bias: vec![0.0; width],
        }
    }
}

/// Every weight is in exactly one of these states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WeightState {
    Float(Matrix),
    Lsi(LsiParams),
    Quantized(QuantizedTensor),
}

impl WeightState {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            WeightState::Float(w) => w.shape(),
            WeightState::Lsi(p) => p.shape(),
            WeightState::Quantized(q) => q.shape(),
        }
    }

    /// The float matrix this state stands for (dequantized codes for a
    /// quantized weight).
    pub fn to_matrix(&self) -> Matrix {
        match self {
            WeightState::Float(w) => w.clone(),
            WeightState::Lsi(p) => lsi::reconstruct(p),
            WeightState::Quantized(q) => dequantize(q),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            WeightState::Float(_) => "float",
            WeightState::Lsi(_) => "lsi",
            WeightState::Quantized(_) => "quantized",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: WeightState,
    pub bias: Vec<f64>,
    /// Learned clipping logits, one pair per quantization group.
    pub clip: Option<ClipLogits>,
}

impl Linear {
    pub fn float(weight: Matrix, bias: Vec<f64>) -> Self {
        Linear {
            weight: WeightState::Float(weight),
            bias,
            clip: None,
        }
    }
}

/// Scale and shift applied to a linear input: `(x − shift) ⊘ scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSmooth {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl ChannelSmooth {
    pub fn identity(width: usize) -> Self {
        ChannelSmooth {
            scale: vec![1.0; width],
            shift: vec![0.0; width],
        }
    }
}

/// Explicit (not yet folded) equivalent transforms of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSmooth {
    /// Input of the q/k/v projections.
    pub qkv: ChannelSmooth,
    /// Query columns are divided by it, key columns multiplied.
    pub attn: Vec<f64>,
    /// Input of the output projection, carried through the value projection.
    pub out: ChannelSmooth,
    /// Input of the MLP up projection.
    pub mlp: ChannelSmooth,
}

impl BlockSmooth {
    pub fn identity(width: usize) -> Self {
        BlockSmooth {
            qkv: ChannelSmooth::identity(width),
            attn: vec![1.0; width],
            out: ChannelSmooth::identity(width),
            mlp: ChannelSmooth::identity(width),
        }
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        for (name, cs) in [("qkv", &self.qkv), ("out", &self.out), ("mlp", &self.mlp)] {
            if cs.scale.len() != width || cs.shift.len() != width {
                return Err(LsiError::Shape(format!("{name} smoothing width mismatch")));
            }
            check_positive(&cs.scale, name)?;
        }
        if self.attn.len() != width {
            return Err(LsiError::Shape("attention smoothing width mismatch".into()));
        }
        check_positive(&self.attn, "attn")
    }
}

pub const LINEAR_NAMES: [&str; 6] = ["q", "k", "v", "o", "up", "down"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub norm1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm2: Norm,
    pub up: Linear,
    pub down: Linear,
    pub smooth: Option<BlockSmooth>,
}

impl Block {
    pub fn linears(&self) -> [&Linear; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.up, &self.down]
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 6] {
        [
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.o,
            &mut self.up,
            &mut self.down,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_width: usize,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGraph {
    pub config: ModelConfig,
    pub embedding: Matrix,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
    pub head: Matrix,
}

/// Weight quantization applied by a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightQuant {
    pub bits: u8,
    pub group_size: Option<usize>,
}

impl WeightQuant {
    pub fn config(&self) -> QuantConfig {
        QuantConfig::weight(self.bits, self.group_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForwardMode {
    Fp,
    WeightOnly(WeightQuant),
    WeightActivation { weight: WeightQuant, act_bits: u8 },
}

impl ForwardMode {
    pub fn weight_only(bits: u8, group_size: Option<usize>) -> Self {
        ForwardMode::WeightOnly(WeightQuant { bits, group_size })
    }

    pub fn weight_activation(bits: u8, act_bits: u8, group_size: Option<usize>) -> Self {
        ForwardMode::WeightActivation {
            weight: WeightQuant { bits, group_size },
            act_bits,
        }
    }

    pub fn weight(&self) -> Option<WeightQuant> {
        match self {
            ForwardMode::Fp => None,
            ForwardMode::WeightOnly(w) | ForwardMode::WeightActivation { weight: w, .. } => Some(*w),
        }
    }

    pub fn weight_config(&self) -> Option<QuantConfig> {
        self.weight().map(|w| w.config())
    }

    /// Activation bit width when activations are quantized.
    pub fn act_bits(&self) -> Option<u8> {
        match self {
            ForwardMode::WeightActivation { act_bits, .. } if *act_bits <= 8 => Some(*act_bits),
            _ => None,
        }
    }

    /// Parse settings such as `w4a16`, `w3a16g128` or `w6a6`. Activation
    /// widths of 16 and above mean weight-only quantization.
    pub fn parse_setting(s: &str) -> Result<Self> {
        let bad = || LsiError::Config(format!("cannot parse setting `{s}` (expected e.g. w4a16g128)"));
        let lower = s.to_ascii_lowercase();
        let rest = lower.strip_prefix('w').ok_or_else(bad)?;
        let (w, rest) = rest.split_once('a').ok_or_else(bad)?;
        let (a, g) = match rest.split_once('g') {
            Some((a, g)) => (a, Some(g)),
            None => (rest, None),
        };
        let bits: u8 = w.parse().map_err(|_| bad())?;
        let act: u32 = a.parse().map_err(|_| bad())?;
        let group = g.map(|g| g.parse::<usize>().map_err(|_| bad())).transpose()?;
        if !(2..=8).contains(&bits) || act < 2 || group == Some(0) {
            return Err(bad());
        }
        Ok(if act >= 16 {
            ForwardMode::weight_only(bits, group)
        } else if act <= 8 {
            ForwardMode::weight_activation(bits, act as u8, group)
        } else {
            return Err(bad());
        })
    }
}

// ---------------------------------------------------------------------------
// Graph construction

/// How a weight enters the graph.
pub(crate) enum WeightBinding {
    /// Float weight, fake-quantized when the mode asks for it.
    Dense(Var),
    /// `U · diag(S + I′) · V_h` with an optional leading block.
    Lsi {
        u: Var,
        s: Var,
        inc: Var,
        square: Option<Var>,
        v_h: Var,
    },
    /// Dequantized codes; used as is.
    Fixed(Var),
}

pub(crate) struct LinearBinding {
    pub weight: WeightBinding,
    pub bias: Var,
    pub clip: Option<(Var, Var)>,
    /// Fake quantization applied to the effective weight.
    pub quant: Option<QuantConfig>,
}

pub(crate) struct SmoothBinding {
    pub qkv_scale: Var,
    pub qkv_shift: Var,
    pub attn: Var,
    pub out_scale: Var,
    pub out_shift: Var,
    pub mlp_scale: Var,
    pub mlp_shift: Var,
}

pub(crate) struct BlockBinding {
    pub norm1: (Var, Var),
    pub norm2: (Var, Var),
    /// q, k, v, o, up, down.
    pub linears: Vec<LinearBinding>,
    pub smooth: Option<SmoothBinding>,
}

/// Effective (pre-quantization) weight, the weight actually used, and bias.
pub(crate) struct LinearParts {
    pub pre_quant: Var,
    pub weight: Var,
    pub bias: Var,
}

pub(crate) struct BlockGraph {
    pub output: Var,
    pub linears: Vec<LinearParts>,
}

#[derive(Default, Clone, Copy)]
struct Adjust {
    row_scale: Option<Var>,
    shift: Option<Var>,
    out_shift: Option<Var>,
    col_mul: Option<Var>,
    col_div: Option<Var>,
}

pub(crate) fn reconstruct_on_tape(
    t: &mut Tape,
    u: Var,
    s: Var,
    inc: Var,
    square: Option<Var>,
    v_h: Var,
) -> Result<Var> {
    let sigma = t.add(s, inc)?;
    let mut core = t.scale_cols(u, sigma)?;
    if let Some(k) = square {
        let n = t.value(k).rows();
        let rows = t.value(u).rows();
        let lead = t.slice(u, 0, rows, 0, n)?;
        let uk = t.matmul(lead, k)?;
        core = t.add_left_block(core, uk)?;
    }
    t.matmul(core, v_h)
}

fn linear_parts(t: &mut Tape, lin: &LinearBinding, adj: Adjust) -> Result<LinearParts> {
    let w_rec = match &lin.weight {
        WeightBinding::Dense(w) => *w,
        WeightBinding::Lsi {
            u,
            s,
            inc,
            square,
            v_h,
        } => reconstruct_on_tape(t, *u, *s, *inc, *square, *v_h)?,
        WeightBinding::Fixed(w) => {
            if adj.row_scale.is_some() || adj.shift.is_some() || adj.col_mul.is_some() || adj.col_div.is_some() {
                return Err(LsiError::Config("cannot smooth an already quantized weight".into()));
            }
            return Ok(LinearParts {
                pre_quant: *w,
                weight: *w,
                bias: lin.bias,
            });
        }
    };
    let mut bias = lin.bias;
    if let Some(d) = adj.shift {
        let dw = t.matmul(d, w_rec)?;
        bias = t.add(bias, dw)?;
    }
    if let Some(d) = adj.out_shift {
        bias = t.sub(bias, d)?;
    }
    let mut w = w_rec;
    if let Some(s) = adj.row_scale {
        w = t.scale_rows(w, s)?;
    }
    if let Some(m) = adj.col_mul {
        w = t.scale_cols(w, m)?;
        bias = t.scale_cols(bias, m)?;
    }
    if let Some(d) = adj.col_div {
        w = t.div_cols(w, d)?;
        bias = t.div_cols(bias, d)?;
    }
    let weight = match &lin.quant {
        Some(cfg) => t.fake_quant(w, cfg, lin.clip)?,
        None => w,
    };
    Ok(LinearParts {
        pre_quant: w,
        weight,
        bias,
    })
}

fn apply(t: &mut Tape, x: Var, parts: &LinearParts) -> Result<Var> {
    let y = t.matmul(x, parts.weight)?;
    t.add_row(y, parts.bias)
}

fn act_quant(t: &mut Tape, x: Var, act_bits: Option<u8>) -> Result<Var> {
    match act_bits {
        Some(bits) => t.fake_quant(x, &QuantConfig::activation(bits), None),
        None => Ok(x),
    }
}

/// `(x − shift) ⊘ scale`.
fn smooth_input(t: &mut Tape, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let neg = t.neg(shift);
    let shifted = t.add_row(x, neg)?;
    t.div_cols(shifted, scale)
}

/// Multi-head causal attention over `seq_len`-row sequences stacked in `q/k/v`.
fn attention(t: &mut Tape, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Result<Var> {
    let (rows, width) = t.value(q).shape();
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut seqs = Vec::with_capacity(rows / seq_len);
    for s in 0..rows / seq_len {
        let r0 = s * seq_len;
        let mut parts = Vec::with_capacity(heads);
        for h in 0..heads {
            let c0 = h * hd;
            let qh = t.slice(q, r0, seq_len, c0, hd)?;
            let kh = t.slice(k, r0, seq_len, c0, hd)?;
            let vh = t.slice(v, r0, seq_len, c0, hd)?;
            let scores = t.matmul_nt(qh, kh)?;
            let p = t.causal_softmax(scores, scale);
            parts.push(t.matmul(p, vh)?);
        }
        seqs.push(if heads == 1 { parts[0] } else { t.concat_cols(&parts)? });
    }
    if seqs.len() == 1 {
        Ok(seqs[0])
    } else {
        t.concat_rows(&seqs)
    }
}

/// One transformer block over `x` (stacked sequences of `seq_len` rows).
pub(crate) fn block_graph(
    t: &mut Tape,
    b: &BlockBinding,
    x: Var,
    seq_len: usize,
    heads: usize,
    act_bits: Option<u8>,
) -> Result<BlockGraph> {
    let rows = t.value(x).rows();
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(LsiError::Shape(format!("{rows} rows are not whole sequences of {seq_len}")));
    }
    let sm = b.smooth.as_ref();
    let l = &b.linears;

    let h1 = t.layer_norm(x, b.norm1.0, b.norm1.1)?;
    let a1 = match sm {
        Some(s) => smooth_input(t, h1, s.qkv_scale, s.qkv_shift)?,
        None => h1,
    };
    let a1 = act_quant(t, a1, act_bits)?;
    let qkv_adj = Adjust {
        row_scale: sm.map(|s| s.qkv_scale),
        shift: sm.map(|s| s.qkv_shift),
        ..Adjust::default()
    };
    let pq = linear_parts(
        t,
        &l[0],
        Adjust {
            col_div: sm.map(|s| s.attn),
            ..qkv_adj
        },
    )?;
    let pk = linear_parts(
        t,
        &l[1],
        Adjust {
            col_mul: sm.map(|s| s.attn),
            ..qkv_adj
        },
    )?;
    let pv = linear_parts(
        t,
        &l[2],
        Adjust {
            out_shift: sm.map(|s| s.out_shift),
            col_div: sm.map(|s| s.out_scale),
            ..qkv_adj
        },
    )?;
    let q = apply(t, a1, &pq)?;
    let k = apply(t, a1, &pk)?;
    let v = apply(t, a1, &pv)?;
    let q = act_quant(t, q, act_bits)?;
    let k = act_quant(t, k, act_bits)?;
    let ctx = attention(t, q, k, v, seq_len, heads)?;
    let ctx = act_quant(t, ctx, act_bits)?;
    let po = linear_parts(
        t,
        &l[3],
        Adjust {
            row_scale: sm.map(|s| s.out_scale),
            shift: sm.map(|s| s.out_shift),
            ..Adjust::default()
        },
    )?;
    let attn_out = apply(t, ctx, &po)?;
    let x1 = t.add(x, attn_out)?;

    let h2 = t.layer_norm(x1, b.norm2.0, b.norm2.1)?;
    let a2 = match sm {
        Some(s) => smooth_input(t, h2, s.mlp_scale, s.mlp_shift)?,
        None => h2,
    };
    let a2 = act_quant(t, a2, act_bits)?;
    let pu = linear_parts(
        t,
        &l[4],
        Adjust {
            row_scale: sm.map(|s| s.mlp_scale),
            shift: sm.map(|s| s.mlp_shift),
            ..Adjust::default()
        },
    )?;
    let up = apply(t, a2, &pu)?;
    let g = t.gelu(up);
    let g = act_quant(t, g, act_bits)?;
    let pd = linear_parts(t, &l[5], Adjust::default())?;
    let down = apply(t, g, &pd)?;
    let output = t.add(x1, down)?;
    Ok(BlockGraph {
        output,
        linears: vec![pq, pk, pv, po, pu, pd],
    })
}

fn check_state_matches(q: &QuantizedTensor, cfg: &QuantConfig) -> Result<()> {
    if q.config.bits != cfg.bits || q.config.granularity != cfg.granularity {
        return Err(LsiError::Config(format!(
            "weight quantized at {} bits / {:?} used in a {} bit / {:?} forward",
            q.config.bits, q.config.granularity, cfg.bits, cfg.granularity
        )));
    }
    Ok(())
}

pub(crate) fn bind_linear_constant(t: &mut Tape, lin: &Linear, mode: &ForwardMode) -> Result<LinearBinding> {
    let cfg = mode.weight_config();
    let (weight, quant) = match (&lin.weight, cfg) {
        (WeightState::Float(w), cfg) => (WeightBinding::Dense(t.constant(w.clone())), cfg),
        (WeightState::Lsi(p), cfg) => (WeightBinding::Dense(t.constant(lsi::reconstruct(p))), cfg),
        (WeightState::Quantized(_), None) => {
            return Err(LsiError::Config("quantized weight in a full-precision forward".into()))
        }
        (WeightState::Quantized(q), Some(cfg)) => {
            check_state_matches(q, &cfg)?;
            (WeightBinding::Fixed(t.constant(dequantize(q))), None)
        }
    };
    let clip = match (&lin.clip, &quant) {
        (Some(c), Some(_)) => Some((t.row_constant(&c.gamma), t.row_constant(&c.beta))),
        _ => None,
    };
    let bias = t.row_constant(&lin.bias);
    Ok(LinearBinding {
        weight,
        bias,
        clip,
        quant,
    })
}

pub(crate) fn bind_smooth_constant(t: &mut Tape, s: &BlockSmooth) -> SmoothBinding {
    SmoothBinding {
        qkv_scale: t.row_constant(&s.qkv.scale),
        qkv_shift: t.row_constant(&s.qkv.shift),
        attn: t.row_constant(&s.attn),
        out_scale: t.row_constant(&s.out.scale),
        out_shift: t.row_constant(&s.out.shift),
        mlp_scale: t.row_constant(&s.mlp.scale),
        mlp_shift: t.row_constant(&s.mlp.shift),
    }
}

pub(crate) fn bind_block_constant(t: &mut Tape, block: &Block, mode: &ForwardMode) -> Result<BlockBinding> {
    let norm1 = (t.row_constant(&block.norm1.gain), t.row_constant(&block.norm1.bias));
    let norm2 = (t.row_constant(&block.norm2.gain), t.row_constant(&block.norm2.bias));
    let linears = block
        .linears()
        .iter()
        .map(|l| bind_linear_constant(t, l, mode))
        .collect::<Result<Vec<_>>>()?;
    let smooth = block.smooth.as_ref().map(|s| bind_smooth_constant(t, s));
    Ok(BlockBinding {
        norm1,
        norm2,
        linears,
        smooth,
    })
}

/// Block forward on plain matrices.
pub fn block_forward(block: &Block, x: &Matrix, seq_len: usize, heads: usize, mode: &ForwardMode) -> Result<Matrix> {
    let mut t = Tape::default();
    let b = bind_block_constant(&mut t, block, mode)?;
    let xv = t.constant(x.clone());
    let g = block_graph(&mut t, &b, xv, seq_len, heads, mode.act_bits())?;
    Ok(t.value(g.output).clone())
}

impl Block {
    /// Bake smoothing, clipping and LSI state into plain quantized weights
    /// for `mode`. Norm layers absorb the input scales and shifts.
    pub fn fold(&self, mode: &ForwardMode) -> Result<Block> {
        let cfg = mode
            .weight_config()
            .ok_or_else(|| LsiError::Config("folding needs a quantized mode".into()))?;
        let mut out = self.clone();
        out.smooth = None;
        match &self.smooth {
            None => {
                for lin in out.linears_mut() {
                    let wcfg = match &lin.clip {
                        Some(c) => cfg.clone().with_clip(c.clone()),
                        None => cfg.clone(),
                    };
                    let q = match &lin.weight {
                        WeightState::Float(w) => quantize(w, &wcfg)?,
                        WeightState::Lsi(p) => lsi::fold(p, &wcfg)?,
                        WeightState::Quantized(q) => {
                            check_state_matches(q, &cfg)?;
                            q.clone()
                        }
                    };
                    lin.weight = WeightState::Quantized(q);
                    lin.clip = None;
                }
            }
            Some(s) => {
                s.validate(self.norm1.gain.len())?;
                let mut t = Tape::default();
                let b = bind_block_constant(&mut t, self, mode)?;
                // A one-row dummy input is enough to materialize the parts.
                let width = self.norm1.gain.len();
                let x = t.constant(Matrix::zeros(1, width));
                let g = block_graph(&mut t, &b, x, 1, 1, None)?;
                for ((lin, parts), orig) in out.linears_mut().into_iter().zip(&g.linears).zip(self.linears()) {
                    if let WeightState::Quantized(_) = orig.weight {
                        return Err(LsiError::Config("cannot fold smoothing into a quantized weight".into()));
                    }
                    let wcfg = match &orig.clip {
                        Some(c) => cfg.clone().with_clip(c.clone()),
                        None => cfg.clone(),
                    };
                    lin.weight = WeightState::Quantized(quantize(t.value(parts.pre_quant), &wcfg)?);
                    lin.bias = t.value(parts.bias).data().to_vec();
                    lin.clip = None;
                }
                let (g1, b1) = crate::smooth::fold_channel_into_norm(
                    &self.norm1.gain,
                    &self.norm1.bias,
                    &s.qkv.scale,
                    &s.qkv.shift,
                )?;
                out.norm1 = Norm { gain: g1, bias: b1 };
                let (g2, b2) = crate::smooth::fold_channel_into_norm(
                    &self.norm2.gain,
                    &self.norm2.bias,
                    &s.mlp.scale,
                    &s.mlp.shift,
                )?;
                out.norm2 = Norm { gain: g2, bias: b2 };
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Whole-model forward

fn uniform_length(tokens: &[Vec<usize>]) -> Result<usize> {
    let first = tokens
        .first()
        .ok_or_else(|| LsiError::Domain("no sequences given".into()))?
        .len();
    if first == 0 || tokens.iter().any(|s| s.len() != first) {
        return Err(LsiError::Shape("sequences must be non-empty and of equal length".into()));
    }
    Ok(first)
}

impl LayerGraph {
    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        if c.heads == 0 || c.width % c.heads != 0 {
            return Err(LsiError::Config(format!("{} heads do not divide width {}", c.heads, c.width)));
        }
        if self.embedding.shape() != (c.vocab, c.width) || self.head.shape() != (c.width, c.vocab) {
            return Err(LsiError::Config("embedding or head shape disagrees with config".into()));
        }
        let d = c.width;
        for (i, b) in self.blocks.iter().enumerate() {
            let expect = [(d, d), (d, d), (d, d), (d, d), (d, c.mlp_width), (c.mlp_width, d)];
            for ((lin, shape), name) in b.linears().iter().zip(expect).zip(LINEAR_NAMES) {
                if lin.weight.shape() != shape || lin.bias.len() != shape.1 {
                    return Err(LsiError::Config(format!("layer {i} {name} has the wrong shape")));
                }
            }
            if let Some(s) = &b.smooth {
                s.validate(d).map_err(|e| e.in_layer(i))?;
            }
        }
        Ok(())
    }

    /// Token embeddings plus positions, sequences stacked row-wise.
    pub fn embed(&self, tokens: &[Vec<usize>]) -> Result<Matrix> {
        let len = uniform_length(tokens)?;
        let pos = nn::sinusoidal_positions(len, self.config.width);
        let mut rows = Vec::with_capacity(tokens.len() * len * self.config.width);
        for seq in tokens {
            for (p, &id) in seq.iter().enumerate() {
                if id >= self.config.vocab {
                    return Err(LsiError::Domain(format!("token {id} outside vocabulary of {}", self.config.vocab)));
                }
                rows.extend(self.embedding.row(id).iter().zip(pos.row(p)).map(|(e, q)| e + q));
            }
        }
        Matrix::from_vec(tokens.len() * len, self.config.width, rows)
    }

    pub fn block(&self, i: usize, x: &Matrix, seq_len: usize, mode: &ForwardMode) -> Result<Matrix> {
        block_forward(&self.blocks[i], x, seq_len, self.config.heads, mode).map_err(|e| e.in_layer(i))
    }

    /// Inputs of every block and the final hidden state: `layers + 1` matrices.
    pub fn hidden_states(&self, tokens: &[Vec<usize>], mode: &ForwardMode) -> Result<Vec<Matrix>> {
        let len = uniform_length(tokens)?;
        let mut states = vec![self.embed(tokens)?];
        for i in 0..self.blocks.len() {
            let next = self.block(i, states.last().expect("nonempty"), len, mode)?;
            states.push(next);
        }
        Ok(states)
    }

    pub fn logits_from_hidden(&self, h: &Matrix) -> Result<Matrix> {
        nn::layer_norm(h, &self.final_norm.gain, &self.final_norm.bias)?.matmul(&self.head)
    }

    /// Logits for equal-length sequences, `(sequences · length) × vocab`.
    pub fn forward(&self, tokens: &[Vec<usize>], mode: &ForwardMode) -> Result<Matrix> {
        let states = self.hidden_states(tokens, mode)?;
        self.logits_from_hidden(states.last().expect("nonempty"))
    }

    /// `exp` of the mean next-token cross entropy over all sequences.
    pub fn perplexity(&self, eval: &[Vec<usize>], mode: &ForwardMode) -> Result<f64> {
        if eval.is_empty() {
            return Err(LsiError::Domain("empty evaluation set".into()));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for seq in eval {
            if seq.len() < 2 {
                return Err(LsiError::Domain("evaluation sequences need at least two tokens".into()));
            }
            let inputs = vec![seq[..seq.len() - 1].to_vec()];
            let logits = self.forward(&inputs, mode)?;
            let (ce, _) = nn::cross_entropy(&logits, &seq[1..])?;
            total += ce * (seq.len() - 1) as f64;
            count += seq.len() - 1;
        }
        Ok((total / count as f64).exp())
    }

    /// Fold every block for `mode`.
    pub fn fold(&self, mode: &ForwardMode) -> Result<LayerGraph> {
        let mut out = self.clone();
        for (i, b) in out.blocks.iter_mut().enumerate() {
            *b = b.fold(mode).map_err(|e| e.in_layer(i))?;
        }
        Ok(out)
    }

    /// Largest ratio of max to median input-channel norm over all float weights.
    pub fn channel_norm_ratio(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for b in &self.blocks {
            for lin in b.linears() {
                let mut norms = lin.weight.to_matrix().row_norms();
                norms.sort_by(f64::total_cmp);
                let median = norms[norms.len() / 2];
                let max = *norms.last().expect("nonempty");
                if median > 0.0 {
                    worst = worst.max(max / median);
                }
            }
        }
        worst
    }
}

// ---------------------------------------------------------------------------
// Synthetic assets

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vocab: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_mult: usize,
    /// Weight standard deviation; `None` means `1/sqrt(fan_in)`.
    pub init_std: Option<f64>,
    /// Fraction of input channels per weight scaled by `outlier_scale`.
    pub outlier_fraction: f64,
    pub outlier_scale: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            vocab: 256,
            width: 64,
            heads: 4,
            layers: 4,
            mlp_mult: 4,
            init_std: None,
            outlier_fraction: 0.05,
            outlier_scale: 10.0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.width == 0 || self.mlp_mult == 0 {
            return Err(LsiError::Config("vocab, width and mlp multiplier must be positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(LsiError::Config(format!("{} heads do not divide width {}", self.heads, self.width)));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) || !(self.outlier_scale > 0.0) {
            return Err(LsiError::Config("outlier fraction must lie in [0, 1] with a positive scale".into()));
        }
        if let Some(s) = self.init_std {
            if !(s > 0.0) {
                return Err(LsiError::Config("init std must be positive".into()));
            }
        }
        Ok(())
    }
}

fn outlier_weight(rng: &mut RandomStream, rows: usize, cols: usize, spec: &ModelSpec) -> Matrix {
    let std = spec.init_std.unwrap_or(1.0 / (rows as f64).sqrt());
    let mut w = rng.normal_matrix(rows, cols, std);
    if spec.outlier_fraction > 0.0 {
        let count = ((spec.outlier_fraction * rows as f64).round() as usize).clamp(1, rows);
        let mut idx: Vec<usize> = (0..rows).collect();
        rng.shuffle(&mut idx);
        for &r in &idx[..count] {
            w.row_mut(r).iter_mut().for_each(|v| *v *= spec.outlier_scale);
        }
    }
    w
}

pub fn make_synthetic_model(spec: &ModelSpec, seed: u64) -> Result<LayerGraph> {
    spec.validate()?;
    let mut rng = seeded_rng(seed);
    let d = spec.width;
    let m = spec.width * spec.mlp_mult;
    let norm = |rng: &mut RandomStream| Norm {
        gain: rng.uniform_vec(d, 0.8, 1.2),
        bias: (0..d).map(|_| 0.05 * rng.normal()).collect(),
    };
    let embedding = rng.normal_matrix(spec.vocab, d, 1.0);
    let mut blocks = Vec::with_capacity(spec.layers);
    for _ in 0..spec.layers {
        let norm1 = norm(&mut rng);
        let lin = |rng: &mut RandomStream, rows, cols| {
            let w = outlier_weight(rng, rows, cols, spec);
            let b = (0..cols).map(|_| 0.02 * rng.normal()).collect();
            Linear::float(w, b)
        };
        let q = lin(&mut rng, d, d);
        let k = lin(&mut rng, d, d);
        let v = lin(&mut rng, d, d);
        let o = lin(&mut rng, d, d);
        let norm2 = norm(&mut rng);
        let up = lin(&mut rng, d, m);
        let down = lin(&mut rng, m, d);
        blocks.push(Block {
            norm1,
            q,
            k,
            v,
            o,
            norm2,
            up,
            down,
            smooth: None,
        });
    }
    let final_norm = norm(&mut rng);
    let head = rng.normal_matrix(d, spec.vocab, 1.0 / (d as f64).sqrt());
    Ok(LayerGraph {
        config: ModelConfig {
            vocab: spec.vocab,
            width: d,
            heads: spec.heads,
            mlp_width: m,
        },
        embedding,
        blocks,
        final_norm,
        head,
    })
}

/// Calibration data: token sequences or raw activation matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CalibSet {
    Tokens(Vec<Vec<usize>>),
    Activations(Vec<Matrix>),
}

impl CalibSet {
    pub fn sample_count(&self) -> usize {
        match self {
            CalibSet::Tokens(t) => t.len(),
            CalibSet::Activations(a) => a.len(),
        }
    }

    /// Common sequence length, if every sample has the same one.
    pub fn seq_len(&self) -> Option<usize> {
        let lens: Vec<usize> = match self {
            CalibSet::Tokens(t) => t.iter().map(Vec::len).collect(),
            CalibSet::Activations(a) => a.iter().map(Matrix::rows).collect(),
        };
        let first = *lens.first()?;
        lens.iter().all(|&l| l == first).then_some(first)
    }

    pub fn tokens(&self) -> Result<&[Vec<usize>]> {
        match self {
            CalibSet::Tokens(t) => Ok(t),
            CalibSet::Activations(_) => Err(LsiError::Config("token sequences required".into())),
        }
    }

    pub fn validate(&self, vocab: Option<usize>) -> Result<()> {
        if self.sample_count() == 0 {
            return Err(LsiError::Domain("calibration set is empty".into()));
        }
        if let (CalibSet::Tokens(t), Some(v)) = (self, vocab) {
            if let Some(bad) = t.iter().flatten().find(|&&id| id >= v) {
                return Err(LsiError::Domain(format!("token {bad} outside vocabulary of {v}")));
            }
        }
        Ok(())
    }
}

/// Sparse first-order Markov source over a vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub vocab: usize,
    pub samples: usize,
    pub seq_len: usize,
    /// Successors per state.
    pub branching: usize,
    /// Seed of the transition table; sampling uses the call's seed.
    pub source_seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            vocab: 256,
            samples: 32,
            seq_len: 16,
            branching: 4,
            source_seed: 0,
        }
    }
}

pub struct MarkovSource {
    successors: Vec<Vec<(usize, f64)>>,
}

impl MarkovSource {
    pub fn new(vocab: usize, branching: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed ^ 0x6d61_726b_6f76);
        let successors = (0..vocab)
            .map(|_| {
                let weights: Vec<f64> = (0..branching).map(|_| rng.uniform().powi(2) + 1e-3).collect();
                let total: f64 = weights.iter().sum();
                let mut acc = 0.0;
                weights
                    .iter()
                    .map(|w| {
                        acc += w / total;
                        (rng.below(vocab), acc)
                    })
                    .collect()
            })
            .collect();
        MarkovSource { successors }
    }

    pub fn sample(&self, len: usize, rng: &mut RandomStream) -> Vec<usize> {
        let mut state = rng.below(self.successors.len());
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(state);
            let u = rng.uniform();
            let next = &self.successors[state];
            state = next.iter().find(|(_, c)| u < *c).unwrap_or(next.last().expect("branching ≥ 1")).0;
        }
        out
    }
}

pub fn make_synthetic_data(spec: &DataSpec, seed: u64) -> Result<CalibSet> {
    if spec.vocab == 0 || spec.samples == 0 || spec.seq_len == 0 || spec.branching == 0 {
        return Err(LsiError::Config("data spec dimensions must be positive".into()));
    }
    let source = MarkovSource::new(spec.vocab, spec.branching, spec.source_seed);
    let mut rng = seeded_rng(seed);
    Ok(CalibSet::Tokens(
        (0..spec.samples).map(|_| source.sample(spec.seq_len, &mut rng)).collect(),
    ))
}

/// Group size a mode quantizes with, if any.
pub fn group_size_of(cfg: &QuantConfig) -> Option<usize> {
    match cfg.granularity {
        Granularity::Group(g) => Some(g),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ModelSpec {
        ModelSpec {
            vocab: 32,
            width: 16,
            heads: 2,
            layers: 2,
            mlp_mult: 2,
            ..ModelSpec::default()
        }
    }

    fn tokens() -> Vec<Vec<usize>> {
        make_synthetic_data(
            &DataSpec {
                vocab: 32,
                samples: 3,
                seq_len: 6,
                ..DataSpec::default()
            },
            1,
        )
        .unwrap()
        .tokens()
        .unwrap()
        .to_vec()
    }

    #[test]
    fn deterministic_generation_and_forward() {
        let a = make_synthetic_model(&small_spec(), 3).unwrap();
        let b = make_synthetic_model(&small_spec(), 3).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        let t = tokens();
        let l1 = a.forward(&t, &ForwardMode::Fp).unwrap();
        let l2 = a.forward(&t, &ForwardMode::Fp).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(l1.shape(), (18, 32));
    }

    #[test]
    fn batch_rows_match_single_sequences() {
        let m = make_synthetic_model(&small_spec(), 4).unwrap();
        let t = tokens();
        let all = m.forward(&t, &ForwardMode::weight_only(4, None)).unwrap();
        let one = m.forward(&t[1..2], &ForwardMode::weight_only(4, None)).unwrap();
        assert!(all.slice(6, 6, 0, 32).unwrap().max_abs_diff(&one).unwrap() < 1e-12);
    }

    #[test]
    fn mode_state_mismatch_is_config_error() {
        let m = make_synthetic_model(&small_spec(), 5).unwrap();
        let q = m.fold(&ForwardMode::weight_only(4, None)).unwrap();
        assert!(matches!(
            q.forward(&tokens(), &ForwardMode::Fp).unwrap_err().root(),
            LsiError::Config(_)
        ));
        assert!(matches!(
            q.forward(&tokens(), &ForwardMode::weight_only(3, None)).unwrap_err().root(),
            LsiError::Config(_)
        ));
        assert!(q.forward(&tokens(), &ForwardMode::weight_only(4, None)).is_ok());
    }

    #[test]
    fn setting_notation() {
        assert_eq!(
            ForwardMode::parse_setting("w4a16g128").unwrap(),
            ForwardMode::weight_only(4, Some(128))
        );
        assert_eq!(
            ForwardMode::parse_setting("W6A6").unwrap(),
            ForwardMode::weight_activation(6, 6, None)
        );
        assert!(ForwardMode::parse_setting("w9a16").is_err());
        assert!(ForwardMode::parse_setting("4a16").is_err());
        assert!(ForwardMode::parse_setting("w4a12").is_err());
    }

    #[test]
    fn explicit_smoothing_matches_folded() {
        let m = make_synthetic_model(&small_spec(), 6).unwrap();
        let mut rng = seeded_rng(9);
        let mut block = m.blocks[0].clone();
        let cs = |rng: &mut RandomStream| ChannelSmooth {
            scale: rng.uniform_vec(16, 0.5, 2.0),
            shift: rng.uniform_vec(16, -0.3, 0.3),
        };
        block.smooth = Some(BlockSmooth {
            qkv: cs(&mut rng),
            attn: rng.uniform_vec(16, 0.5, 2.0),
            out: cs(&mut rng),
            mlp: cs(&mut rng),
        });
        let x = m.embed(&tokens()).unwrap();
        let fp_plain = block_forward(&m.blocks[0], &x, 6, 2, &ForwardMode::Fp).unwrap();
        let fp_smooth = block_forward(&block, &x, 6, 2, &ForwardMode::Fp).unwrap();
        assert!(fp_plain.max_abs_diff(&fp_smooth).unwrap() < 1e-9);

        let mode = ForwardMode::weight_only(4, None);
        let explicit = block_forward(&block, &x, 6, 2, &mode).unwrap();
        let folded = block_forward(&block.fold(&mode).unwrap(), &x, 6, 2, &mode).unwrap();
        assert!(explicit.max_abs_diff(&folded).unwrap() < 1e-9);
    }
}
