//! Layerwise calibration: Adam over LSI, smoothing and clipping parameters,
//! trained through straight-through fake quantization.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ResidualMode, Tape, Var};
use crate::error::{LsiError, Result};
use crate::lsi::{self, LsiParams};
use crate::model::{
    block_graph, reconstruct_on_tape, Block, BlockBinding, BlockSmooth, ChannelSmooth,
    ForwardMode, LayerGraph, LinearBinding, SmoothBinding, WeightBinding, WeightState,
};
use crate::quant::{dequantize, ClipLogits, FrozenRounding, Granularity, QuantConfig};
use crate::tensor::{frobenius_mse, seeded_rng, Matrix, SvdFactors};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Losses at or below this are SVD round-off; such layers are left alone.
pub const EXACT_LOSS: f64 = 1e-24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    CalibrateAll,
    FinetuneLast(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Step size for `I′` and `K`.
    pub learning_rate: f64,
    /// Step size for log channel scales, shifts and the log attention scale.
    pub smooth_lr: f64,
    /// Step size for clipping logits.
    pub clip_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub ste_clip: bool,
    pub lsi: bool,
    pub smooth: bool,
    pub lwc: bool,
    /// Square block size for group-wise weights; 0 disables it.
    pub square_n: usize,
    /// Start `I′` from small random values instead of zeros.
    pub random_init: bool,
    /// Feed each layer the quantized outputs of its predecessors.
    pub propagate: bool,
    /// Return folded (plain quantized) layers.
    pub fold: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            smooth_lr: 5e-3,
            clip_lr: 1e-2,
            weight_decay: 0.0,
            epochs: 2,
            batch_size: 4,
            seed: 0,
            mode: TrainMode::CalibrateAll,
            ste_clip: true,
            lsi: true,
            smooth: true,
            lwc: true,
            square_n: lsi::DEFAULT_SQUARE_N,
            random_init: false,
            propagate: true,
            fold: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, layers: Option<usize>) -> Result<()> {
        for (name, v) in [
            ("learning rate", self.learning_rate),
            ("smoothing learning rate", self.smooth_lr),
            ("clipping learning rate", self.clip_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LsiError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(LsiError::Config("weight decay must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(LsiError::Config("epochs and batch size must be at least 1".into()));
        }
        if let TrainMode::FinetuneLast(l) = self.mode {
            if l == 0 || layers.is_some_and(|n| l > n) {
                return Err(LsiError::Config(format!("cannot finetune the last {l} layers")));
            }
        }
        Ok(())
    }

    pub fn lr_for(&self, class: ParamClass) -> f64 {
        match class {
            ParamClass::Increment | ParamClass::Square => self.learning_rate,
            ParamClass::LogChannelScale | ParamClass::Shift | ParamClass::LogAttnScale => self.smooth_lr,
            ParamClass::ClipUpper | ParamClass::ClipLower => self.clip_lr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamClass {
    Increment,
    Square,
    LogChannelScale,
    Shift,
    LogAttnScale,
    ClipUpper,
    ClipLower,
}

impl ParamClass {
    pub const ALL: [ParamClass; 7] = [
        ParamClass::Increment,
        ParamClass::Square,
        ParamClass::LogChannelScale,
        ParamClass::Shift,
        ParamClass::LogAttnScale,
        ParamClass::ClipUpper,
        ParamClass::ClipLower,
    ];

    pub fn is_lsi(self) -> bool {
        matches!(self, ParamClass::Increment | ParamClass::Square)
    }

    pub fn is_smooth(self) -> bool {
        matches!(
            self,
            ParamClass::LogChannelScale | ParamClass::Shift | ParamClass::LogAttnScale
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub class: ParamClass,
    pub value: Matrix,
    pub m: Matrix,
    pub v: Matrix,
    pub step: u64,
    /// Entries with mask 0 never move.
    pub mask: Option<Matrix>,
}

impl Param {
    pub fn new(name: impl Into<String>, class: ParamClass, value: Matrix) -> Self {
        let (r, c) = value.shape();
        Param {
            name: name.into(),
            class,
            value,
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
            step: 0,
            mask: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub layer: usize,
    pub params: Vec<Param>,
}

impl ParamGroup {
    fn push(&mut self, p: Param) -> usize {
        self.params.push(p);
        self.params.len() - 1
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Euclidean norm of all increments.
    pub fn increment_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.class == ParamClass::Increment)
            .map(|p| p.value.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn find(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// One Adam update. `None` gradients leave the parameter and its state alone.
pub fn adam_step(group: &ParamGroup, grads: &[Option<Matrix>], cfg: &TrainConfig) -> Result<ParamGroup> {
    if grads.len() != group.params.len() {
        return Err(LsiError::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            group.params.len()
        )));
    }
    let mut out = group.clone();
    for (p, g) in out.params.iter_mut().zip(grads) {
        let Some(g) = g else { continue };
        if g.shape() != p.value.shape() {
            return Err(LsiError::Shape(format!("gradient shape mismatch for `{}`", p.name)));
        }
        if !g.is_finite() {
            return Err(LsiError::NonFiniteGradient {
                layer: group.layer,
                param: p.name.clone(),
            });
        }
        let g = match &p.mask {
            Some(mask) => g.hadamard(mask)?,
            None => g.clone(),
        };
        p.step += 1;
        let lr = cfg.lr_for(p.class);
        let t = p.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let value = p.value.data_mut();
        let m = p.m.data_mut();
        let v = p.v.data_mut();
        for i in 0..value.len() {
            let gi = g.data()[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            if p.mask.as_ref().is_some_and(|mk| mk.data()[i] == 0.0) {
                continue;
            }
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            value[i] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + cfg.weight_decay * value[i]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub layer: usize,
    pub epoch: usize,
    pub loss: f64,
    pub inorm: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "layer={} epoch={} loss={:e} inorm={:e}",
            self.layer, self.epoch, self.loss, self.inorm
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub initial_loss: f64,
    /// Smallest loss seen (the returned state's loss).
    pub final_loss: f64,
    /// Epoch whose state was kept; 0 means the initial state.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub trace: Vec<EpochRecord>,
}

/// A differentiable loss over a set of samples.
pub trait Objective {
    fn sample_count(&self) -> usize;
    /// Build the loss of `samples` on `t`, with `vars[i]` bound to parameter `i`.
    fn build(&self, t: &mut Tape, vars: &[Var], samples: &[usize]) -> Result<Var>;
}

fn bind_params(t: &mut Tape, group: &ParamGroup, trainable: bool) -> Vec<Var> {
    group
        .params
        .iter()
        .map(|p| {
            if trainable {
                t.param(p.value.clone())
            } else {
                t.constant(p.value.clone())
            }
        })
        .collect()
}

/// Loss of `samples` at the group's current values.
pub fn evaluate(obj: &dyn Objective, group: &ParamGroup, samples: &[usize]) -> Result<f64> {
    let mut t = Tape::default();
    let vars = bind_params(&mut t, group, false);
    let loss = obj.build(&mut t, &vars, samples)?;
    Ok(t.value(loss).get(0, 0))
}

/// Loss and per-parameter gradients.
///
/// `residuals` selects how fake quantization rounds; in `Record` mode the
/// residuals of every quantization node are returned for later replay.
pub fn loss_and_grads(
    obj: &dyn Objective,
    group: &ParamGroup,
    samples: &[usize],
    residuals: ResidualMode,
    ste_clip: bool,
) -> Result<(f64, Vec<Matrix>, Vec<FrozenRounding>)> {
    let mut t = Tape::new(ste_clip).with_residuals(residuals);
    let vars = bind_params(&mut t, group, true);
    let loss = obj.build(&mut t, &vars, samples)?;
    let grads = t.backward(loss);
    let out = group
        .params
        .iter()
        .zip(&vars)
        .map(|(p, v)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(p.value.rows(), p.value.cols()))
        })
        .collect();
    let value = t.value(loss).get(0, 0);
    Ok((value, out, t.take_recorded()))
}

/// Loss of the smooth surrogate: the forward with rounding replaced by the
/// given residuals.
pub fn surrogate_loss(
    obj: &dyn Objective,
    group: &ParamGroup,
    samples: &[usize],
    residuals: &[FrozenRounding],
) -> Result<f64> {
    let mut t = Tape::default().with_residuals(ResidualMode::Replay(residuals.to_vec()));
    let vars = bind_params(&mut t, group, false);
    let loss = obj.build(&mut t, &vars, samples)?;
    Ok(t.value(loss).get(0, 0))
}

/// Adam over `group` with best-so-far restoration. Each epoch runs one pass
/// over the shuffled samples per phase; a phase only updates the classes it
/// accepts.
pub fn optimize(
    obj: &dyn Objective,
    group: &mut ParamGroup,
    cfg: &TrainConfig,
    phases: &[fn(ParamClass) -> bool],
) -> Result<TrainOutcome> {
    let n = obj.sample_count();
    if n == 0 {
        return Err(LsiError::Domain("no calibration samples".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let initial = evaluate(obj, group, &all)?;
    let mut outcome = TrainOutcome {
        initial_loss: initial,
        final_loss: initial,
        best_epoch: 0,
        epochs_run: 0,
        trace: Vec::new(),
    };
    if initial <= EXACT_LOSS || group.params.is_empty() {
        return Ok(outcome);
    }
    let mut best = group.clone();
    let mut rng = seeded_rng(cfg.seed ^ (group.layer as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut order = all.clone();
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        for accept in phases {
            for batch in order.chunks(cfg.batch_size) {
                let (_, grads, _) = loss_and_grads(obj, group, batch, ResidualMode::Normal, cfg.ste_clip)?;
                let grads: Vec<Option<Matrix>> = group
                    .params
                    .iter()
                    .zip(grads)
                    .map(|(p, g)| accept(p.class).then_some(g))
                    .collect();
                *group = adam_step(group, &grads, cfg)?;
            }
        }
        let loss = evaluate(obj, group, &all)?;
        outcome.epochs_run = epoch;
        outcome.trace.push(EpochRecord {
            layer: group.layer,
            epoch,
            loss,
            inorm: group.increment_norm(),
        });
        if !loss.is_finite() || loss > 10.0 * initial {
            return Err(LsiError::Divergence {
                layer: group.layer,
                epoch,
                loss,
                initial,
                trace: outcome.trace.iter().map(|r| r.loss).collect(),
            });
        }
        if loss < outcome.final_loss {
            outcome.final_loss = loss;
            outcome.best_epoch = epoch;
            best = group.clone();
        }
    }
    *group = best;
    Ok(outcome)
}

fn all_classes(_: ParamClass) -> bool {
    true
}

fn lsi_classes(c: ParamClass) -> bool {
    c.is_lsi()
}

fn smooth_classes(c: ParamClass) -> bool {
    c.is_smooth()
}

fn phases_for(cfg: &TrainConfig) -> Vec<fn(ParamClass) -> bool> {
    match cfg.mode {
        TrainMode::CalibrateAll => vec![all_classes],
        TrainMode::FinetuneLast(_) => vec![lsi_classes, smooth_classes],
    }
}

// ---------------------------------------------------------------------------
// Single linear layer

/// `‖X·W + b − (X·fq(W̃) + b)‖²` averaged, for one linear layer under LSI.
pub struct LinearObjective {
    factors: SvdFactors,
    has_square: bool,
    has_clip: bool,
    bias: Vec<f64>,
    quant: QuantConfig,
    inputs: Vec<Matrix>,
    targets: Vec<Matrix>,
}

impl LinearObjective {
    /// The group holds `inc`, then `square` and clip logits when enabled.
    pub fn new(
        w: &Matrix,
        bias: &[f64],
        inputs: &[Matrix],
        quant: &QuantConfig,
        square_n: usize,
        lwc: bool,
    ) -> Result<(Self, ParamGroup)> {
        let p = LsiParams::capture(w, square_n)?;
        let groups = quant.group_count(w.rows(), w.cols());
        quant.validate(w.rows(), w.cols())?;
        let targets = inputs
            .iter()
            .map(|x| x.matmul(w)?.add_row_vector(bias))
            .collect::<Result<Vec<_>>>()?;
        let mut group = ParamGroup::default();
        group.push(Param::new("inc", ParamClass::Increment, Matrix::row_vector(&p.increment)));
        if let Some(k) = &p.square {
            group.push(Param::new("square", ParamClass::Square, k.clone()));
        }
        if lwc {
            let c = quant.clip.clone().unwrap_or_else(|| ClipLogits::init(groups));
            group.push(Param::new("gamma", ParamClass::ClipUpper, Matrix::row_vector(&c.gamma)));
            group.push(Param::new("beta", ParamClass::ClipLower, Matrix::row_vector(&c.beta)));
        }
        Ok((
            LinearObjective {
                has_square: p.square.is_some(),
                has_clip: lwc,
                factors: p.factors,
                bias: bias.to_vec(),
                quant: quant.without_clip(),
                inputs: inputs.to_vec(),
                targets,
            },
            group,
        ))
    }

    pub fn params(&self, group: &ParamGroup) -> LsiParams {
        LsiParams {
            factors: self.factors.clone(),
            increment: group.params[0].value.data().to_vec(),
            square: self.has_square.then(|| group.params[1].value.clone()),
        }
    }

    /// Quantization config including the learned clipping.
    pub fn quant_config(&self, group: &ParamGroup) -> QuantConfig {
        if self.has_clip {
            let off = 1 + self.has_square as usize;
            self.quant.clone().with_clip(ClipLogits {
                gamma: group.params[off].value.data().to_vec(),
                beta: group.params[off + 1].value.data().to_vec(),
            })
        } else {
            self.quant.clone()
        }
    }
}

impl Objective for LinearObjective {
    fn sample_count(&self) -> usize {
        self.inputs.len()
    }

    fn build(&self, t: &mut Tape, vars: &[Var], samples: &[usize]) -> Result<Var> {
        let xs: Vec<&Matrix> = samples.iter().map(|&i| &self.inputs[i]).collect();
        let ys: Vec<&Matrix> = samples.iter().map(|&i| &self.targets[i]).collect();
        let x = t.constant(Matrix::concat_rows(&xs)?);
        let y = t.constant(Matrix::concat_rows(&ys)?);
        let u = t.constant(self.factors.u.clone());
        let s = t.row_constant(&self.factors.s);
        let v_h = t.constant(self.factors.v_h.clone());
        let square = self.has_square.then(|| vars[1]);
        let w = reconstruct_on_tape(t, u, s, vars[0], square, v_h)?;
        let clip = self.has_clip.then(|| {
            let off = 1 + self.has_square as usize;
            (vars[off], vars[off + 1])
        });
        let wq = t.fake_quant(w, &self.quant, clip)?;
        let b = t.row_constant(&self.bias);
        let out = t.matmul(x, wq)?;
        let out = t.add_row(out, b)?;
        t.mse(out, y)
    }
}

#[derive(Clone, Debug)]
pub struct LinearCalibration {
    pub params: LsiParams,
    /// Quantization config with the learned clipping, ready for `fold`.
    pub quant: QuantConfig,
    pub outcome: TrainOutcome,
}

/// Calibrate one linear layer `x·w + b`. `increment_mask` freezes the
/// increments it marks `false`.
pub fn calibrate_linear(
    w: &Matrix,
    bias: &[f64],
    inputs: &[Matrix],
    quant: &QuantConfig,
    cfg: &TrainConfig,
    increment_mask: Option<&[bool]>,
) -> Result<LinearCalibration> {
    cfg.validate(None)?;
    if !cfg.lsi {
        return Err(LsiError::Config("linear calibration needs LSI enabled".into()));
    }
    let square_n = if matches!(quant.granularity, Granularity::Group(_)) {
        cfg.square_n
    } else {
        0
    };
    let (obj, mut group) = LinearObjective::new(w, bias, inputs, quant, square_n, cfg.lwc)?;
    if cfg.random_init {
        let mut rng = seeded_rng(cfg.seed);
        let s0 = obj.factors.s.first().copied().unwrap_or(0.0);
        group.params[0]
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 1e-3 * s0 * rng.normal());
    }
    if let Some(mask) = increment_mask {
        if mask.len() != group.params[0].value.len() {
            return Err(LsiError::Shape("increment mask length differs from rank dimension".into()));
        }
        group.params[0].mask = Some(Matrix::row_vector(
            &mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<_>>(),
        ));
    }
    let outcome = optimize(&obj, &mut group, cfg, &phases_for(cfg))?;
    Ok(LinearCalibration {
        params: obj.params(&group),
        quant: obj.quant_config(&group),
        outcome,
    })
}

/// Reconstruction loss of a linear layer at given LSI parameters.
pub fn linear_loss(w: &Matrix, bias: &[f64], p: &LsiParams, quant: &QuantConfig, inputs: &[Matrix]) -> Result<f64> {
    let wq = lsi::lsi_fake_quantize(p, quant)?;
    let x = Matrix::concat_rows(&inputs.iter().collect::<Vec<_>>())?;
    let y = x.matmul(w)?.add_row_vector(bias)?;
    let yq = x.matmul(&wq)?.add_row_vector(bias)?;
    frobenius_mse(&y, &yq)
}

// ---------------------------------------------------------------------------
// Transformer block

enum TrainWeight {
    Const(Matrix),
    Lsi {
        factors: SvdFactors,
        inc: usize,
        square: Option<usize>,
    },
}

struct TrainLinear {
    weight: TrainWeight,
    clip: Option<(usize, usize)>,
}

#[derive(Clone, Copy)]
struct TrainSmooth {
    qkv_scale: usize,
    qkv_shift: usize,
    attn: usize,
    out_scale: usize,
    out_shift: usize,
    mlp_scale: usize,
    mlp_shift: usize,
}

/// Reconstruction loss of one block against fixed targets.
pub struct BlockObjective {
    template: Block,
    linears: Vec<TrainLinear>,
    smooth: Option<TrainSmooth>,
    quant: QuantConfig,
    mode: ForwardMode,
    heads: usize,
    seq_len: usize,
    inputs: Vec<Matrix>,
    targets: Vec<Matrix>,
}

fn log_row(v: &[f64]) -> Matrix {
    Matrix::row_vector(&v.iter().map(|x| x.ln()).collect::<Vec<_>>())
}

impl BlockObjective {
    /// Set up trainable parameters for `block` as `cfg` asks. Inputs and
    /// targets are per-sample `seq_len × width` matrices.
    pub fn new(
        block: &Block,
        heads: usize,
        inputs: Vec<Matrix>,
        targets: Vec<Matrix>,
        mode: &ForwardMode,
        cfg: &TrainConfig,
        layer: usize,
    ) -> Result<(Self, ParamGroup)> {
        let quant = mode
            .weight_config()
            .ok_or_else(|| LsiError::Config("calibration needs a quantized mode".into()))?;
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(LsiError::Domain("need matching, non-empty inputs and targets".into()));
        }
        let seq_len = inputs[0].rows();
        if inputs.iter().chain(&targets).any(|m| m.rows() != seq_len) {
            return Err(LsiError::Shape("calibration samples differ in length".into()));
        }
        let square_n = if matches!(quant.granularity, Granularity::Group(_)) {
            cfg.square_n
        } else {
            0
        };
        let finetune = matches!(cfg.mode, TrainMode::FinetuneLast(_));
        let lwc = cfg.lwc && !finetune;
        let mut rng = seeded_rng(cfg.seed.wrapping_add(layer as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
        let mut group = ParamGroup {
            layer,
            params: Vec::new(),
        };
        let mut linears = Vec::with_capacity(6);
        for (lin, name) in block.linears().iter().zip(crate::model::LINEAR_NAMES) {
            let (rows, cols) = lin.weight.shape();
            quant.validate(rows, cols)?;
            let weight = match (&lin.weight, cfg.lsi) {
                (WeightState::Lsi(p), true) => Self::lsi_params(&mut group, name, p.clone()),
                (state, true) => {
                    let base = match state {
                        WeightState::Quantized(q) => dequantize(q),
                        other => other.to_matrix(),
                    };
                    let mut p = LsiParams::capture(&base, square_n)?;
                    if cfg.random_init {
                        let s0 = p.factors.s.first().copied().unwrap_or(0.0);
                        p.increment.iter_mut().for_each(|v| *v = 1e-3 * s0 * rng.normal());
                    }
                    Self::lsi_params(&mut group, name, p)
                }
                (state, false) => TrainWeight::Const(match state {
                    WeightState::Quantized(q) => dequantize(q),
                    other => other.to_matrix(),
                }),
            };
            let clip = lwc.then(|| {
                let c = lin
                    .clip
                    .clone()
                    .unwrap_or_else(|| ClipLogits::init(quant.group_count(rows, cols)));
                (
                    group.push(Param::new(format!("{name}.gamma"), ParamClass::ClipUpper, Matrix::row_vector(&c.gamma))),
                    group.push(Param::new(format!("{name}.beta"), ParamClass::ClipLower, Matrix::row_vector(&c.beta))),
                )
            });
            linears.push(TrainLinear { weight, clip });
        }
        let width = block.norm1.gain.len();
        let smooth = cfg.smooth.then(|| {
            let init = block.smooth.clone().unwrap_or_else(|| BlockSmooth::identity(width));
            let mut add = |name: &str, class, m: Matrix| group.push(Param::new(name, class, m));
            TrainSmooth {
                qkv_scale: add("qkv.log_scale", ParamClass::LogChannelScale, log_row(&init.qkv.scale)),
                qkv_shift: add("qkv.shift", ParamClass::Shift, Matrix::row_vector(&init.qkv.shift)),
                attn: add("attn.log_scale", ParamClass::LogAttnScale, log_row(&init.attn)),
                out_scale: add("out.log_scale", ParamClass::LogChannelScale, log_row(&init.out.scale)),
                out_shift: add("out.shift", ParamClass::Shift, Matrix::row_vector(&init.out.shift)),
                mlp_scale: add("mlp.log_scale", ParamClass::LogChannelScale, log_row(&init.mlp.scale)),
                mlp_shift: add("mlp.shift", ParamClass::Shift, Matrix::row_vector(&init.mlp.shift)),
            }
        });
        let mut template = block.clone();
        if !cfg.smooth && block.smooth.is_some() {
            return Err(LsiError::Config("block carries smoothing but smoothing is disabled".into()));
        }
        template.smooth = None;
        Ok((
            BlockObjective {
                template,
                linears,
                smooth,
                quant,
                mode: *mode,
                heads,
                seq_len,
                inputs,
                targets,
            },
            group,
        ))
    }

    fn lsi_params(group: &mut ParamGroup, name: &str, p: LsiParams) -> TrainWeight {
        let inc = group.push(Param::new(
            format!("{name}.inc"),
            ParamClass::Increment,
            Matrix::row_vector(&p.increment),
        ));
        let square = p
            .square
            .map(|k| group.push(Param::new(format!("{name}.square"), ParamClass::Square, k)));
        TrainWeight::Lsi {
            factors: p.factors,
            inc,
            square,
        }
    }

    fn binding(&self, t: &mut Tape, vars: &[Var]) -> Result<BlockBinding> {
        let b = &self.template;
        let norm1 = (t.row_constant(&b.norm1.gain), t.row_constant(&b.norm1.bias));
        let norm2 = (t.row_constant(&b.norm2.gain), t.row_constant(&b.norm2.bias));
        let mut linears = Vec::with_capacity(6);
        for (tl, lin) in self.linears.iter().zip(b.linears()) {
            let weight = match &tl.weight {
                TrainWeight::Const(w) => WeightBinding::Dense(t.constant(w.clone())),
                TrainWeight::Lsi { factors, inc, square } => WeightBinding::Lsi {
                    u: t.constant(factors.u.clone()),
                    s: t.row_constant(&factors.s),
                    inc: vars[*inc],
                    square: square.map(|i| vars[i]),
                    v_h: t.constant(factors.v_h.clone()),
                },
            };
            linears.push(LinearBinding {
                weight,
                bias: t.row_constant(&lin.bias),
                clip: tl.clip.map(|(g, b)| (vars[g], vars[b])),
                quant: Some(self.quant.clone()),
            });
        }
        let smooth = match &self.smooth {
            Some(s) => Some(SmoothBinding {
                qkv_scale: t.exp(vars[s.qkv_scale]),
                qkv_shift: vars[s.qkv_shift],
                attn: t.exp(vars[s.attn]),
                out_scale: t.exp(vars[s.out_scale]),
                out_shift: vars[s.out_shift],
                mlp_scale: t.exp(vars[s.mlp_scale]),
                mlp_shift: vars[s.mlp_shift],
            }),
            None => None,
        };
        Ok(BlockBinding {
            norm1,
            norm2,
            linears,
            smooth,
        })
    }

    /// The block state described by `group`: LSI weights, clipping logits
    /// and explicit smoothing, not yet folded.
    pub fn to_block(&self, group: &ParamGroup) -> Block {
        let mut out = self.template.clone();
        let row = |i: usize| group.params[i].value.data().to_vec();
        for (lin, tl) in out.linears_mut().into_iter().zip(&self.linears) {
            if let TrainWeight::Lsi { factors, inc, square } = &tl.weight {
                lin.weight = WeightState::Lsi(LsiParams {
                    factors: factors.clone(),
                    increment: row(*inc),
                    square: square.map(|i| group.params[i].value.clone()),
                });
            } else if let TrainWeight::Const(w) = &tl.weight {
                lin.weight = WeightState::Float(w.clone());
            }
            if let Some((g, b)) = tl.clip {
                lin.clip = Some(ClipLogits {
                    gamma: row(g),
                    beta: row(b),
                });
            }
        }
        if let Some(s) = &self.smooth {
            let exp = |i: usize| row(i).iter().map(|v| v.exp()).collect::<Vec<_>>();
            out.smooth = Some(BlockSmooth {
                qkv: ChannelSmooth {
                    scale: exp(s.qkv_scale),
                    shift: row(s.qkv_shift),
                },
                attn: exp(s.attn),
                out: ChannelSmooth {
                    scale: exp(s.out_scale),
                    shift: row(s.out_shift),
                },
                mlp: ChannelSmooth {
                    scale: exp(s.mlp_scale),
                    shift: row(s.mlp_shift),
                },
            });
        }
        out
    }

    /// Same objective with the full-precision forward in place of the
    /// quantized one; used to check that smoothing leaves it unchanged.
    pub fn full_precision(&self) -> BlockObjective {
        BlockObjective {
            template: self.template.clone(),
            linears: self
                .linears
                .iter()
                .map(|l| TrainLinear {
                    weight: match &l.weight {
                        TrainWeight::Const(w) => TrainWeight::Const(w.clone()),
                        TrainWeight::Lsi { factors, inc, square } => TrainWeight::Lsi {
                            factors: factors.clone(),
                            inc: *inc,
                            square: *square,
                        },
                    },
                    clip: l.clip,
                })
                .collect(),
            smooth: self.smooth,
            quant: self.quant.clone(),
            mode: ForwardMode::Fp,
            heads: self.heads,
            seq_len: self.seq_len,
            inputs: self.inputs.clone(),
            targets: self.targets.clone(),
        }
    }
}

impl Objective for BlockObjective {
    fn sample_count(&self) -> usize {
        self.inputs.len()
    }

    fn build(&self, t: &mut Tape, vars: &[Var], samples: &[usize]) -> Result<Var> {
        let xs: Vec<&Matrix> = samples.iter().map(|&i| &self.inputs[i]).collect();
        let ys: Vec<&Matrix> = samples.iter().map(|&i| &self.targets[i]).collect();
        let x = t.constant(Matrix::concat_rows(&xs)?);
        let y = t.constant(Matrix::concat_rows(&ys)?);
        let mut b = self.binding(t, vars)?;
        if self.mode == ForwardMode::Fp {
            for l in &mut b.linears {
                l.quant = None;
                l.clip = None;
            }
        }
        let g = block_graph(t, &b, x, self.seq_len, self.heads, self.mode.act_bits())?;
        t.mse(g.output, y)
    }
}

#[derive(Clone, Debug)]
pub struct CalibratedBlock {
    /// Trained, unfolded block.
    pub block: Block,
    pub outcome: TrainOutcome,
    pub trainable: usize,
    pub square_n: usize,
}

/// Split stacked sequences into per-sample matrices.
pub fn split_samples(x: &Matrix, seq_len: usize) -> Result<Vec<Matrix>> {
    if seq_len == 0 || x.rows() % seq_len != 0 {
        return Err(LsiError::Shape(format!("{} rows are not whole sequences of {seq_len}", x.rows())));
    }
    (0..x.rows() / seq_len)
        .map(|i| x.slice(i * seq_len, seq_len, 0, x.cols()))
        .collect()
}

/// Train one block so that its quantized forward on `input` matches `target`.
pub fn calibrate_layer(
    block: &Block,
    heads: usize,
    input: &Matrix,
    target: &Matrix,
    seq_len: usize,
    mode: &ForwardMode,
    cfg: &TrainConfig,
    layer: usize,
) -> Result<CalibratedBlock> {
    cfg.validate(None)?;
    let (obj, mut group) = BlockObjective::new(
        block,
        heads,
        split_samples(input, seq_len)?,
        split_samples(target, seq_len)?,
        mode,
        cfg,
        layer,
    )?;
    let outcome = optimize(&obj, &mut group, cfg, &phases_for(cfg))?;
    let square_n = group
        .params
        .iter()
        .filter(|p| p.class == ParamClass::Square)
        .map(|p| p.value.rows())
        .max()
        .unwrap_or(0);
    Ok(CalibratedBlock {
        block: obj.to_block(&group),
        outcome,
        trainable: group.trainable_count(),
        square_n,
    })
}

/// Mean squared difference between `target` and the block's output on `input`.
pub fn layer_loss(
    block: &Block,
    heads: usize,
    input: &Matrix,
    target: &Matrix,
    seq_len: usize,
    mode: &ForwardMode,
) -> Result<f64> {
    let out = crate::model::block_forward(block, input, seq_len, heads, mode)?;
    frobenius_mse(&out, target)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    /// Round-to-nearest loss on the same inputs.
    pub baseline_loss: f64,
    /// Loss before training.
    pub initial_loss: f64,
    /// Loss of the returned (folded) layer.
    pub final_loss: f64,
    pub reduction_pct: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub trainable: usize,
    pub square_n: usize,
    pub trace: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibReport {
    pub layers: Vec<LayerReport>,
    pub mean_baseline_loss: f64,
    pub mean_final_loss: f64,
}

fn reduction(baseline: f64, fin: f64) -> f64 {
    if baseline > 0.0 {
        100.0 * (baseline - fin) / baseline
    } else {
        0.0
    }
}

fn summarize(layers: Vec<LayerReport>) -> CalibReport {
    let n = layers.len().max(1) as f64;
    CalibReport {
        mean_baseline_loss: layers.iter().map(|l| l.baseline_loss).sum::<f64>() / n,
        mean_final_loss: layers.iter().map(|l| l.final_loss).sum::<f64>() / n,
        layers,
    }
}

fn float_block(block: &Block) -> Block {
    let mut b = block.clone();
    b.smooth = None;
    for lin in b.linears_mut() {
        lin.clip = None;
        if let WeightState::Lsi(p) = &lin.weight {
            lin.weight = WeightState::Float(lsi::reconstruct(p));
        }
    }
    b
}

/// Calibrate every block in order and return the quantized model.
pub fn calibrate_model(
    model: &LayerGraph,
    calib: &[Vec<usize>],
    mode: &ForwardMode,
    cfg: &TrainConfig,
) -> Result<(LayerGraph, CalibReport)> {
    cfg.validate(Some(model.blocks.len()))?;
    model.validate()?;
    let seq_len = calib.first().map_or(0, Vec::len);
    let fp = model.hidden_states(calib, &ForwardMode::Fp)?;
    let heads = model.config.heads;
    let mut out = model.clone();
    let mut q_in = fp[0].clone();
    let mut reports = Vec::with_capacity(model.blocks.len());
    for i in 0..model.blocks.len() {
        let input = if cfg.propagate { q_in.clone() } else { fp[i].clone() };
        let run = || -> Result<(Block, LayerReport, Matrix)> {
            let baseline = layer_loss(&float_block(&model.blocks[i]), heads, &input, &fp[i + 1], seq_len, mode)?;
            let cal = calibrate_layer(&model.blocks[i], heads, &input, &fp[i + 1], seq_len, mode, cfg, i)?;
            let block = if cfg.fold { cal.block.fold(mode)? } else { cal.block };
            let q_out = crate::model::block_forward(&block, &input, seq_len, heads, mode)?;
            let fin = frobenius_mse(&q_out, &fp[i + 1])?;
            let report = LayerReport {
                layer: i,
                baseline_loss: baseline,
                initial_loss: cal.outcome.initial_loss,
                final_loss: fin,
                reduction_pct: reduction(baseline, fin),
                epochs_run: cal.outcome.epochs_run,
                best_epoch: cal.outcome.best_epoch,
                trainable: cal.trainable,
                square_n: cal.square_n,
                trace: cal.outcome.trace,
            };
            Ok((block, report, q_out))
        };
        let (block, report, q_out) = run().map_err(|e| e.in_layer(i))?;
        out.blocks[i] = block;
        reports.push(report);
        q_in = q_out;
    }
    Ok((out, summarize(reports)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub first_layer: usize,
    /// Mean per-layer loss of the finetuned layers before and after, each
    /// measured along its own model's quantized trajectory.
    pub loss_before: f64,
    pub loss_after: f64,
    pub layers: Vec<LayerReport>,
}

fn trajectory_losses(
    model: &LayerGraph,
    tokens: &[Vec<usize>],
    fp: &[Matrix],
    mode: &ForwardMode,
    from: usize,
) -> Result<Vec<f64>> {
    let q = model.hidden_states(tokens, mode)?;
    (from..model.blocks.len())
        .map(|i| frobenius_mse(&q[i + 1], &fp[i + 1]))
        .collect()
}

/// Requantize the last `L` layers of an already quantized model from the
/// full-precision `reference` weights, calibrated on `data` along the
/// quantized trajectory. A layer is only replaced when its loss drops.
/// Earlier layers are left untouched.
pub fn finetune_last_layers(
    model: &LayerGraph,
    reference: &LayerGraph,
    data: &[Vec<usize>],
    mode: &ForwardMode,
    cfg: &TrainConfig,
) -> Result<(LayerGraph, FinetuneReport)> {
    let n = model.blocks.len();
    cfg.validate(Some(n))?;
    let TrainMode::FinetuneLast(l) = cfg.mode else {
        return Err(LsiError::Config("finetuning needs a finetune-last mode".into()));
    };
    if reference.blocks.len() != n || reference.config != model.config {
        return Err(LsiError::Config("reference model does not match".into()));
    }
    let seq_len = data.first().map_or(0, Vec::len);
    let heads = model.config.heads;
    let fp = reference.hidden_states(data, &ForwardMode::Fp)?;
    let first = n - l;
    let before = trajectory_losses(model, data, &fp, mode, first)?;
    let mut out = model.clone();
    let mut q_in = model.hidden_states(data, mode)?.swap_remove(first);
    let mut reports = Vec::with_capacity(l);
    for i in first..n {
        let run = || -> Result<(Block, LayerReport, Matrix)> {
            let baseline = layer_loss(&model.blocks[i], heads, &q_in, &fp[i + 1], seq_len, mode)?;
            let cal = calibrate_layer(&reference.blocks[i], heads, &q_in, &fp[i + 1], seq_len, mode, cfg, i)?;
            let mut block = cal.block.fold(mode)?;
            let mut q_out = crate::model::block_forward(&block, &q_in, seq_len, heads, mode)?;
            let mut fin = frobenius_mse(&q_out, &fp[i + 1])?;
            if !(fin < baseline) {
                block = model.blocks[i].clone();
                q_out = crate::model::block_forward(&block, &q_in, seq_len, heads, mode)?;
                fin = baseline;
            }
            Ok((
                block,
                LayerReport {
                    layer: i,
                    baseline_loss: baseline,
                    initial_loss: cal.outcome.initial_loss,
                    final_loss: fin,
                    reduction_pct: reduction(baseline, fin),
                    epochs_run: cal.outcome.epochs_run,
                    best_epoch: cal.outcome.best_epoch,
                    trainable: cal.trainable,
                    square_n: cal.square_n,
                    trace: cal.outcome.trace,
                },
                q_out,
            ))
        };
        let (block, report, q_out) = run().map_err(|e| e.in_layer(i))?;
        out.blocks[i] = block;
        reports.push(report);
        q_in = q_out;
    }
    let after = trajectory_losses(&out, data, &fp, mode, first)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((
        out,
        FinetuneReport {
            first_layer: first,
            loss_before: mean(&before),
            loss_after: mean(&after),
            layers: reports,
        },
    ))
}

/// Per-layer losses of `model` along its own trajectory in `mode`, against
/// the full-precision hidden states of `reference`.
pub fn trajectory_layer_losses(
    model: &LayerGraph,
    reference: &LayerGraph,
    tokens: &[Vec<usize>],
    mode: &ForwardMode,
) -> Result<Vec<f64>> {
    let fp = reference.hidden_states(tokens, &ForwardMode::Fp)?;
    trajectory_losses(model, tokens, &fp, mode, 0)
}

// ---------------------------------------------------------------------------
// Language-model pretraining of the toy model

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 200,
            batch_size: 8,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

struct LmObjective<'a> {
    model: &'a LayerGraph,
    data: &'a [Vec<usize>],
}

impl LmObjective<'_> {
    fn group(model: &LayerGraph) -> Result<ParamGroup> {
        let mut g = ParamGroup::default();
        let mut add = |name: String, m: Matrix| {
            g.push(Param::new(name, ParamClass::Increment, m));
        };
        add("embedding".into(), model.embedding.clone());
        for (i, b) in model.blocks.iter().enumerate() {
            if b.smooth.is_some() {
                return Err(LsiError::Config("pretraining needs unsmoothed blocks".into()));
            }
            add(format!("{i}.norm1.gain"), Matrix::row_vector(&b.norm1.gain));
            add(format!("{i}.norm1.bias"), Matrix::row_vector(&b.norm1.bias));
            add(format!("{i}.norm2.gain"), Matrix::row_vector(&b.norm2.gain));
            add(format!("{i}.norm2.bias"), Matrix::row_vector(&b.norm2.bias));
            for (lin, name) in b.linears().iter().zip(crate::model::LINEAR_NAMES) {
                let WeightState::Float(w) = &lin.weight else {
                    return Err(LsiError::Config("pretraining needs float weights".into()));
                };
                add(format!("{i}.{name}.weight"), w.clone());
                add(format!("{i}.{name}.bias"), Matrix::row_vector(&lin.bias));
            }
        }
        add("final.gain".into(), Matrix::row_vector(&model.final_norm.gain));
        add("final.bias".into(), Matrix::row_vector(&model.final_norm.bias));
        add("head".into(), model.head.clone());
        Ok(g)
    }

    fn write_back(model: &mut LayerGraph, g: &ParamGroup) {
        let mut it = g.params.iter().map(|p| p.value.clone());
        let mut next = || it.next().expect("parameter count");
        model.embedding = next();
        for b in &mut model.blocks {
            b.norm1.gain = next().into_vec();
            b.norm1.bias = next().into_vec();
            b.norm2.gain = next().into_vec();
            b.norm2.bias = next().into_vec();
            for lin in b.linears_mut() {
                lin.weight = WeightState::Float(next());
                lin.bias = next().into_vec();
            }
        }
        model.final_norm.gain = next().into_vec();
        model.final_norm.bias = next().into_vec();
        model.head = next();
    }
}

impl Objective for LmObjective<'_> {
    fn sample_count(&self) -> usize {
        self.data.len()
    }

    fn build(&self, t: &mut Tape, vars: &[Var], samples: &[usize]) -> Result<Var> {
        let len = self.data[samples[0]].len() - 1;
        let mut ids = Vec::new();
        let mut targets = Vec::new();
        for &s in samples {
            let seq = &self.data[s];
            if seq.len() != len + 1 {
                return Err(LsiError::Shape("pretraining sequences differ in length".into()));
            }
            ids.extend_from_slice(&seq[..len]);
            targets.extend_from_slice(&seq[1..]);
        }
        let pos = crate::nn::sinusoidal_positions(len, self.model.config.width);
        let pos_all = Matrix::concat_rows(&vec![&pos; samples.len()])?;
        let emb = t.gather(vars[0], &ids)?;
        let pos_v = t.constant(pos_all);
        let mut x = t.add(emb, pos_v)?;
        let mut k = 1;
        for _ in &self.model.blocks {
            let norm1 = (vars[k], vars[k + 1]);
            let norm2 = (vars[k + 2], vars[k + 3]);
            k += 4;
            let mut linears = Vec::with_capacity(6);
            for _ in 0..6 {
                linears.push(LinearBinding {
                    weight: WeightBinding::Dense(vars[k]),
                    bias: vars[k + 1],
                    clip: None,
                    quant: None,
                });
                k += 2;
            }
            let b = BlockBinding {
                norm1,
                norm2,
                linears,
                smooth: None,
            };
            x = block_graph(t, &b, x, len, self.model.config.heads, None)?.output;
        }
        let h = t.layer_norm(x, vars[k], vars[k + 1])?;
        let logits = t.matmul(h, vars[k + 2])?;
        t.cross_entropy(logits, &targets)
    }
}

/// Train all float weights of `model` on next-token prediction with Adam.
/// Returns the batch loss of every step.
pub fn pretrain(model: &mut LayerGraph, data: &[Vec<usize>], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if data.is_empty() || data.iter().any(|s| s.len() < 2) {
        return Err(LsiError::Domain("pretraining needs sequences of at least two tokens".into()));
    }
    let mut group = LmObjective::group(model)?;
    let tc = TrainConfig {
        learning_rate: cfg.learning_rate,
        ..TrainConfig::default()
    };
    let obj = LmObjective { model, data };
    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut cursor = order.len();
    for _ in 0..cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let batch = &order[cursor..(cursor + cfg.batch_size).min(order.len())];
        cursor += cfg.batch_size;
        let (loss, grads, _) = loss_and_grads(&obj, &group, batch, ResidualMode::Normal, true)?;
        losses.push(loss);
        group = adam_step(&group, &grads.into_iter().map(Some).collect::<Vec<_>>(), &tc)?;
    }
    LmObjective::write_back(model, &group);
    Ok(losses)
}

/// Quantization config a mode would apply to a layer, with learned clipping.
pub fn layer_quant_config(lin: &crate::model::Linear, mode: &ForwardMode) -> Option<QuantConfig> {
    let cfg = mode.weight_config()?;
    Some(match &lin.clip {
        Some(c) => cfg.with_clip(c.clone()),
        None => cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut g = ParamGroup::default();
        g.push(Param::new("x", ParamClass::Increment, Matrix::row_vector(&[1.0, -2.0])));
        let out = adam_step(&g, &[Some(Matrix::zeros(1, 2))], &TrainConfig::default()).unwrap();
        assert_eq!(out.params[0].value, g.params[0].value);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut g = ParamGroup::default();
        g.push(Param::new("x", ParamClass::Increment, Matrix::row_vector(&[0.5])));
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let out = adam_step(&g, &[Some(Matrix::row_vector(&[1.0]))], &cfg).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        let expect = 0.5 - 0.1 / (1.0 + ADAM_EPS);
        assert!((out.params[0].value.get(0, 0) - expect).abs() < 1e-15);
        assert_eq!(out.params[0].step, 1);
    }

    #[test]
    fn adam_converges_on_square() {
        let mut g = ParamGroup::default();
        g.push(Param::new("x", ParamClass::Increment, Matrix::row_vector(&[1.0])));
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        for _ in 0..100 {
            let x = g.params[0].value.get(0, 0);
            g = adam_step(&g, &[Some(Matrix::row_vector(&[2.0 * x]))], &cfg).unwrap();
        }
        assert!(g.params[0].value.get(0, 0).abs() < 0.05);
    }

    #[test]
    fn adam_decoupled_decay() {
        let mut g = ParamGroup::default();
        g.push(Param::new("x", ParamClass::Increment, Matrix::row_vector(&[2.0])));
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let out = adam_step(&g, &[Some(Matrix::row_vector(&[0.0]))], &cfg).unwrap();
        assert!((out.params[0].value.get(0, 0) - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut g = ParamGroup {
            layer: 3,
            params: Vec::new(),
        };
        g.push(Param::new("q.inc", ParamClass::Increment, Matrix::row_vector(&[0.0])));
        let err = adam_step(&g, &[Some(Matrix::row_vector(&[f64::NAN]))], &TrainConfig::default()).unwrap_err();
        match err {
            LsiError::NonFiniteGradient { layer, param } => {
                assert_eq!(layer, 3);
                assert_eq!(param, "q.inc");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trace_line_format() {
        let r = EpochRecord {
            layer: 2,
            epoch: 7,
            loss: 0.125,
            inorm: 1.5,
        };
        assert_eq!(r.to_string(), "layer=2 epoch=7 loss=1.25e-1 inorm=1.5e0");
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate(Some(4)).is_ok());
        c.mode = TrainMode::FinetuneLast(0);
        assert!(c.validate(Some(4)).is_err());
        c.mode = TrainMode::FinetuneLast(5);
        assert!(c.validate(Some(4)).is_err());
        c = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate(None).is_err());
    }
}
