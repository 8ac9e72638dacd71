//! `lsiquant` command-line front end.
//!
//! Metrics go to stdout as JSON, training traces to stderr.
//! Exit codes: 0 success, 2 usage, 3 data or parse error, 4 divergence.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use lsiquant::io::{load_calib, read_model, write_model, write_tokens, CalibFormat};
use lsiquant::model::{
    make_synthetic_data, make_synthetic_model, CalibSet, DataSpec, ForwardMode, LayerGraph, ModelSpec, WeightState,
};
use lsiquant::quant::Granularity;
use lsiquant::train::{
    calibrate_model, finetune_last_layers, pretrain, trajectory_layer_losses, CalibReport, PretrainConfig,
    TrainConfig, TrainMode,
};
use lsiquant::LsiError;

#[derive(Parser)]
#[command(name = "lsiquant", version, about = "Post-training quantization with learnable singular value increments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic model plus calibration and evaluation token files.
    Gen(GenArgs),
    /// Calibrate and quantize a model; writes the folded model.
    Quantize(QuantizeArgs),
    /// Perplexity and reconstruction metrics.
    Eval(EvalArgs),
    /// Retrain the last layers of a quantized model.
    Finetune(FinetuneArgs),
    /// Run the component ablation table.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long)]
    out_calib: PathBuf,
    #[arg(long)]
    out_eval: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    mlp_mult: usize,
    #[arg(long, default_value_t = 0.05)]
    outlier_fraction: f64,
    #[arg(long, default_value_t = 10.0)]
    outlier_scale: f64,
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, default_value_t = 32)]
    eval_samples: usize,
    #[arg(long, default_value_t = 16)]
    seq_len: usize,
    #[arg(long, default_value_t = 4)]
    branching: usize,
    /// Next-token training steps on the calibration source before writing.
    #[arg(long, default_value_t = 0)]
    pretrain_steps: usize,
}

#[derive(Args, Clone)]
struct QuantArgs {
    /// Paper-style setting such as w4a16g128.
    #[arg(long, conflicts_with_all = ["bits", "group_size", "act_bits"])]
    setting: Option<String>,
    #[arg(long)]
    bits: Option<u8>,
    #[arg(long)]
    group_size: Option<usize>,
    /// Activation bits; 16 or more means weight-only.
    #[arg(long)]
    act_bits: Option<u32>,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_lsi: bool,
    /// Disables both the equivalent transforms and weight clipping.
    #[arg(long)]
    no_smooth: bool,
    #[arg(long)]
    no_lwc: bool,
    #[arg(long)]
    square_n: Option<usize>,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    quant: QuantArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Full-precision model for reconstruction metrics.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[command(flatten)]
    quant: QuantArgs,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Quantized model to update.
    #[arg(long)]
    model: PathBuf,
    /// Full-precision model providing targets.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Token file from another distribution; its loss change is reported.
    #[arg(long)]
    heldout: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    finetune_last: usize,
    #[command(flatten)]
    quant: QuantArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    /// Square block sizes to compare; needs --group-size.
    #[arg(long, value_delimiter = ',')]
    square_n_set: Vec<usize>,
    #[command(flatten)]
    quant: QuantArgs,
    #[command(flatten)]
    train: TrainArgs,
}

enum Failure {
    Usage(String),
    Lib(LsiError),
}

impl From<LsiError> for Failure {
    fn from(e: LsiError) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<Value, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn exit_code(e: &LsiError) -> u8 {
    match e.root() {
        LsiError::Divergence { .. } | LsiError::NonFiniteGradient { .. } => 4,
        LsiError::Config(_) => 2,
        _ => 3,
    }
}

impl QuantArgs {
    fn given(&self) -> bool {
        self.setting.is_some() || self.bits.is_some() || self.group_size.is_some() || self.act_bits.is_some()
    }

    fn mode(&self) -> Result<Option<ForwardMode>, Failure> {
        if let Some(s) = &self.setting {
            return ForwardMode::parse_setting(s).map(Some).map_err(|e| usage(e.to_string()));
        }
        if !self.given() {
            return Ok(None);
        }
        let bits = self.bits.ok_or_else(|| usage("--bits is required with --group-size or --act-bits"))?;
        if !(2..=8).contains(&bits) {
            return Err(usage("--bits must lie in 2..=8"));
        }
        if self.group_size == Some(0) {
            return Err(usage("--group-size must be positive"));
        }
        Ok(Some(match self.act_bits {
            None => ForwardMode::weight_only(bits, self.group_size),
            Some(a) if a >= 16 => ForwardMode::weight_only(bits, self.group_size),
            Some(a) if (2..=8).contains(&a) => ForwardMode::weight_activation(bits, a as u8, self.group_size),
            Some(a) => return Err(usage(format!("unsupported --act-bits {a}"))),
        }))
    }

    /// Explicit flags win; otherwise the stored weight format, weight-only.
    fn mode_for(&self, model: &LayerGraph) -> Result<ForwardMode, Failure> {
        if let Some(m) = self.mode()? {
            return Ok(m);
        }
        Ok(stored_mode(model).unwrap_or(ForwardMode::Fp))
    }
}

fn stored_mode(model: &LayerGraph) -> Option<ForwardMode> {
    model.blocks.iter().flat_map(|b| b.linears()).find_map(|l| match &l.weight {
        WeightState::Quantized(q) => Some(ForwardMode::weight_only(
            q.config.bits,
            match q.config.granularity {
                Granularity::Group(g) => Some(g),
                _ => None,
            },
        )),
        _ => None,
    })
}

impl TrainArgs {
    fn config(&self, mode: &ForwardMode, tmode: TrainMode) -> Result<TrainConfig, Failure> {
        let mut cfg = TrainConfig {
            seed: self.seed,
            mode: tmode,
            lsi: !self.no_lsi,
            smooth: !self.no_smooth,
            lwc: !(self.no_lwc || self.no_smooth),
            ..TrainConfig::default()
        };
        if let Some(lr) = self.lr {
            cfg.learning_rate = lr;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        let grouped = mode.weight().is_some_and(|w| w.group_size.is_some());
        match self.square_n {
            Some(n) if n > 0 && !grouped => return Err(usage("--square-n > 0 requires --group-size")),
            Some(n) => cfg.square_n = n,
            None if !grouped => cfg.square_n = 0,
            None => {}
        }
        cfg.validate(None).map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }
}

fn read_tokens(path: &Path, vocab: usize) -> Result<Vec<Vec<usize>>, Failure> {
    match load_calib(path, CalibFormat::Tokens { vocab: Some(vocab) })? {
        CalibSet::Tokens(t) => {
            let len = t[0].len();
            if let Some(i) = t.iter().position(|s| s.len() != len) {
                return Err(LsiError::parse(
                    format!("line {}", i + 1),
                    format!("sequence length {} differs from {len}", t[i].len()),
                )
                .into());
            }
            Ok(t)
        }
        CalibSet::Activations(_) => unreachable!("token format requested"),
    }
}

fn print_trace(report: &CalibReport) {
    for l in &report.layers {
        for r in &l.trace {
            eprintln!("{r}");
        }
    }
}

fn report_json(report: &CalibReport) -> Value {
    let layers: Vec<Value> = report
        .layers
        .iter()
        .map(|l| {
            json!({
                "layer": l.layer,
                "rtn_loss": l.baseline_loss,
                "initial_loss": l.initial_loss,
                "final_loss": l.final_loss,
                "reduction_pct": l.reduction_pct,
                "epochs_run": l.epochs_run,
                "best_epoch": l.best_epoch,
                "trainable": l.trainable,
                "square_n": l.square_n,
            })
        })
        .collect();
    let n = report.layers.len().max(1) as f64;
    json!({
        "layers": layers,
        "mean_rtn_loss": report.mean_baseline_loss,
        "mean_final_loss": report.mean_final_loss,
        "mean_reduction_pct": report.layers.iter().map(|l| l.reduction_pct).sum::<f64>() / n,
        "square_enabled": report.layers.iter().any(|l| l.square_n > 0),
    })
}

fn setting_label(mode: &ForwardMode) -> String {
    match mode {
        ForwardMode::Fp => "fp".into(),
        ForwardMode::WeightOnly(w) | ForwardMode::WeightActivation { weight: w, .. } => {
            let a = mode.act_bits().unwrap_or(16);
            match w.group_size {
                Some(g) => format!("w{}a{a}g{g}", w.bits),
                None => format!("w{}a{a}", w.bits),
            }
        }
    }
}

fn cmd_gen(a: &GenArgs) -> CmdResult {
    let spec = ModelSpec {
        vocab: a.vocab,
        width: a.width,
        heads: a.heads,
        layers: a.layers,
        mlp_mult: a.mlp_mult,
        init_std: None,
        outlier_fraction: a.outlier_fraction,
        outlier_scale: a.outlier_scale,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let data = |samples, seed| {
        make_synthetic_data(
            &DataSpec {
                vocab: a.vocab,
                samples,
                seq_len: a.seq_len,
                branching: a.branching,
                source_seed: a.seed,
            },
            seed,
        )
        .and_then(|c| c.tokens().map(<[_]>::to_vec))
        .map_err(|e| usage(e.to_string()))
    };
    let calib = data(a.samples, a.seed.wrapping_mul(2).wrapping_add(1))?;
    let mut model = make_synthetic_model(&spec, a.seed)?;
    let mut pretrain_loss = Value::Null;
    if a.pretrain_steps > 0 {
        let losses = pretrain(
            &mut model,
            &calib,
            &PretrainConfig {
                steps: a.pretrain_steps,
                seed: a.seed,
                ..PretrainConfig::default()
            },
        )?;
        pretrain_loss = json!({ "first": losses[0], "last": losses[losses.len() - 1] });
    }
    write_model(&a.out_model, &model)?;
    write_tokens(&a.out_calib, &calib)?;
    if let Some(p) = &a.out_eval {
        write_tokens(p, &data(a.eval_samples, a.seed.wrapping_mul(2).wrapping_add(2))?)?;
    }
    Ok(json!({
        "model": a.out_model,
        "calib": a.out_calib,
        "eval": a.out_eval,
        "layers": a.layers,
        "channel_norm_ratio": model.channel_norm_ratio(),
        "pretrain_loss": pretrain_loss,
    }))
}

fn quantize_mode(q: &QuantArgs) -> Result<ForwardMode, Failure> {
    q.mode()?.ok_or_else(|| usage("quantization needs --bits or --setting"))
}

fn cmd_quantize(a: &QuantizeArgs) -> CmdResult {
    let mode = quantize_mode(&a.quant)?;
    let cfg = a.train.config(&mode, TrainMode::CalibrateAll)?;
    let model = read_model(&a.model)?;
    let calib = read_tokens(&a.calib, model.config.vocab)?;
    let (out, report) = calibrate_model(&model, &calib, &mode, &cfg)?;
    print_trace(&report);
    write_model(&a.out, &out)?;
    let mut v = report_json(&report);
    v["setting"] = json!(setting_label(&mode));
    v["lsi"] = json!(cfg.lsi);
    v["smooth"] = json!(cfg.smooth);
    v["lwc"] = json!(cfg.lwc);
    if let Some(p) = &a.report {
        let text = serde_json::to_string_pretty(&v).expect("report serializes");
        lsiquant::io::write_atomic(p, text.as_bytes())?;
    }
    Ok(v)
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let model = read_model(&a.model)?;
    let mode = a.quant.mode_for(&model)?;
    let data = read_tokens(&a.data, model.config.vocab)?;
    let ppl = model.perplexity(&data, &mode)?;
    let mut v = json!({ "setting": setting_label(&mode), "perplexity": ppl });
    let reference = match &a.reference {
        Some(p) => Some(read_model(p)?),
        None if stored_mode(&model).is_none() => Some(model.clone()),
        None => None,
    };
    if let Some(r) = reference {
        let layers = trajectory_layer_losses(&model, &r, &data, &mode)?;
        v["end_to_end_mse"] = json!(layers.last().copied().unwrap_or(0.0));
        v["layer_losses"] = json!(layers);
    }
    Ok(v)
}

fn cmd_finetune(a: &FinetuneArgs) -> CmdResult {
    if a.finetune_last == 0 {
        return Err(usage("--finetune-last must be at least 1"));
    }
    let model = read_model(&a.model)?;
    let mode = a.quant.mode_for(&model)?;
    if mode == ForwardMode::Fp {
        return Err(usage("finetuning needs a quantized model or --bits"));
    }
    let mut cfg = a.train.config(&mode, TrainMode::FinetuneLast(a.finetune_last))?;
    cfg.validate(Some(model.blocks.len())).map_err(|e| usage(e.to_string()))?;
    cfg.mode = TrainMode::FinetuneLast(a.finetune_last);
    let reference = read_model(&a.reference)?;
    let data = read_tokens(&a.data, model.config.vocab)?;
    let heldout = a
        .heldout
        .as_ref()
        .map(|p| read_tokens(p, model.config.vocab))
        .transpose()?;
    let (out, report) = finetune_last_layers(&model, &reference, &data, &mode, &cfg)?;
    for l in &report.layers {
        for r in &l.trace {
            eprintln!("{r}");
        }
    }
    write_model(&a.out, &out)?;
    let mut v = json!({
        "first_layer": report.first_layer,
        "target_loss_before": report.loss_before,
        "target_loss_after": report.loss_after,
        "layers": report.layers.iter().map(|l| json!({
            "layer": l.layer,
            "initial_loss": l.initial_loss,
            "final_loss": l.final_loss,
        })).collect::<Vec<_>>(),
    });
    if let Some(h) = heldout {
        let before = model.perplexity(&h, &mode)?;
        let after = out.perplexity(&h, &mode)?;
        v["heldout_ppl_before"] = json!(before);
        v["heldout_ppl_after"] = json!(after);
        v["heldout_ppl_delta"] = json!(after - before);
    }
    Ok(v)
}

fn cmd_ablate(a: &AblateArgs) -> CmdResult {
    let mode = quantize_mode(&a.quant)?;
    let base = a.train.config(&mode, TrainMode::CalibrateAll)?;
    let grouped = mode.weight().is_some_and(|w| w.group_size.is_some());
    if !a.square_n_set.is_empty() && !grouped {
        return Err(usage("--square-n-set requires --group-size"));
    }
    let model = read_model(&a.model)?;
    let calib = read_tokens(&a.calib, model.config.vocab)?;
    let mut variants: Vec<(String, TrainConfig)> = vec![
        ("full".into(), base.clone()),
        ("no-lsi".into(), TrainConfig { lsi: false, ..base.clone() }),
        (
            "no-smooth".into(),
            TrainConfig {
                smooth: false,
                lwc: false,
                ..base.clone()
            },
        ),
        ("no-lwc".into(), TrainConfig { lwc: false, ..base.clone() }),
    ];
    for &n in &a.square_n_set {
        variants.push((format!("square-n={n}"), TrainConfig { square_n: n, ..base.clone() }));
    }
    let mut rows = Vec::new();
    for (name, cfg) in variants {
        let (_, report) = calibrate_model(&model, &calib, &mode, &cfg)?;
        let n = report.layers.len().max(1) as f64;
        rows.push(json!({
            "variant": name,
            "square_n": report.layers.iter().map(|l| l.square_n).max().unwrap_or(0),
            "mean_rtn_loss": report.mean_baseline_loss,
            "mean_final_loss": report.mean_final_loss,
            "mean_reduction_pct": report.layers.iter().map(|l| l.reduction_pct).sum::<f64>() / n,
        }));
    }
    Ok(json!({ "setting": setting_label(&mode), "rows": rows }))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(v) => {
            let text = serde_json::to_string_pretty(&v).expect("report serializes");
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
