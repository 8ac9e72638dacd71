use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lsiquant::io::read_model;
use lsiquant::model::{ForwardMode, LayerGraph};
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsiquant")).args(args).output().unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn generate(seed: u64, layers: usize, extra: &[&str]) -> (Fixture, Value) {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let f = Fixture { _dir: dir, root };
    let seed = seed.to_string();
    let layers = layers.to_string();
    let (m, c, e) = (f.path("model.lsiq"), f.path("calib.txt"), f.path("eval.txt"));
    let mut args = vec![
        "gen", "--out-model", p(&m), "--out-calib", p(&c), "--out-eval", p(&e), "--seed", &seed,
        "--vocab", "32", "--width", "16", "--heads", "2", "--layers", &layers, "--mlp-mult", "2",
    ];
    for (flag, default) in [("--samples", "8"), ("--eval-samples", "8"), ("--seq-len", "8")] {
        if !extra.contains(&flag) {
            args.extend_from_slice(&[flag, default]);
        }
    }
    args.extend_from_slice(extra);
    let v = ok_json(&args);
    (f, v)
}

fn quantize(f: &Fixture, out: &str, extra: &[&str]) -> Value {
    let (m, c, o) = (f.path("model.lsiq"), f.path("calib.txt"), f.path(out));
    let mut args = vec!["quantize", "--model", p(&m), "--calib", p(&c), "--out", p(&o), "--epochs", "2"];
    args.extend_from_slice(extra);
    ok_json(&args)
}

fn tensors(model: &LayerGraph, block: usize) -> String {
    format!("{:?}", model.blocks[block])
}

#[test]
fn gen_is_deterministic() {
    let (a, va) = generate(5, 2, &[]);
    let (b, vb) = generate(5, 2, &[]);
    for name in ["model.lsiq", "calib.txt", "eval.txt"] {
        assert_eq!(std::fs::read(a.path(name)).unwrap(), std::fs::read(b.path(name)).unwrap(), "{name}");
    }
    assert_eq!(va["channel_norm_ratio"], vb["channel_norm_ratio"]);
    let (c, _) = generate(6, 2, &[]);
    assert_ne!(std::fs::read(a.path("model.lsiq")).unwrap(), std::fs::read(c.path("model.lsiq")).unwrap());
}

#[test]
fn outlier_fraction_changes_channel_norms() {
    let (_, flat) = generate(1, 1, &["--outlier-fraction", "0"]);
    let (_, spiky) = generate(1, 1, &["--outlier-fraction", "0.2"]);
    let r = |v: &Value| v["channel_norm_ratio"].as_f64().unwrap();
    assert!(r(&spiky) > 2.0 * r(&flat), "{} vs {}", r(&spiky), r(&flat));
}

#[test]
fn plain_rounding_run_reports_no_reduction() {
    let (f, _) = generate(2, 2, &[]);
    let v = quantize(&f, "rtn.lsiq", &["--bits", "4", "--no-lsi", "--no-smooth"]);
    assert_eq!(v["mean_reduction_pct"].as_f64().unwrap(), 0.0);
    assert_eq!(v["square_enabled"], Value::Bool(false));
}

#[test]
fn grouped_square_run_enables_square_blocks() {
    let (f, _) = generate(3, 2, &[]);
    let report = f.path("report.json");
    let v = quantize(&f, "q.lsiq", &["--bits", "2", "--group-size", "16", "--square-n", "8", "--report", p(&report)]);
    assert_eq!(v["square_enabled"], Value::Bool(true));
    assert_eq!(v["setting"], "w2a16g16");
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(saved, v);
}

#[test]
fn usage_and_input_errors_have_distinct_codes() {
    let (f, _) = generate(4, 2, &[]);
    let (m, c, o) = (f.path("model.lsiq"), f.path("calib.txt"), f.path("x.lsiq"));
    let square = run(&["quantize", "--model", p(&m), "--calib", p(&c), "--out", p(&o), "--bits", "4", "--square-n", "4"]);
    assert_eq!(square.status.code(), Some(2));
    let junk = f.path("junk.lsiq");
    std::fs::write(&junk, b"not a model").unwrap();
    let bad = run(&["eval", "--model", p(&junk), "--data", p(&c)]);
    assert_eq!(bad.status.code(), Some(3));
    let missing = run(&["eval", "--model", p(&f.path("absent.lsiq")), "--data", p(&c)]);
    assert_eq!(missing.status.code(), Some(3));
    assert_eq!(run(&["quantize", "--model", p(&m)]).status.code(), Some(2));
    assert!(!o.exists());
}

#[test]
fn eval_matches_library_and_repeats_exactly() {
    let (f, _) = generate(5, 2, &[]);
    let (m, e) = (f.path("model.lsiq"), f.path("eval.txt"));
    let args = ["eval", "--model", p(&m), "--data", p(&e)];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let v: Value = serde_json::from_slice(&a.stdout).unwrap();
    let model = read_model(&m).unwrap();
    let toks: Vec<Vec<usize>> = std::fs::read_to_string(&e)
        .unwrap()
        .lines()
        .map(|l| l.split_whitespace().map(|t| t.parse().unwrap()).collect())
        .collect();
    let ppl = model.perplexity(&toks, &ForwardMode::Fp).unwrap();
    assert_eq!(v["perplexity"].as_f64().unwrap(), ppl);
    assert_eq!(v["end_to_end_mse"].as_f64().unwrap(), 0.0);
}

#[test]
fn fewer_bits_evaluate_worse() {
    let (f, g) = generate(
        6,
        2,
        &["--pretrain-steps", "300", "--samples", "128", "--eval-samples", "16", "--seq-len", "16"],
    );
    assert!(g["pretrain_loss"]["last"].as_f64() < g["pretrain_loss"]["first"].as_f64());
    let (m, e) = (f.path("model.lsiq"), f.path("eval.txt"));
    let ppl = |bits: &str| {
        ok_json(&["eval", "--model", p(&m), "--data", p(&e), "--bits", bits])["perplexity"]
            .as_f64()
            .unwrap()
    };
    let (w4, w3, w2) = (ppl("4"), ppl("3"), ppl("2"));
    assert!(w4 <= w3 && w3 <= w2, "{w4} {w3} {w2}");
    let fp = ok_json(&["eval", "--model", p(&m), "--data", p(&e)])["perplexity"].as_f64().unwrap();
    assert!(fp < 32.0, "{fp}");
}

#[test]
fn finetune_leaves_early_layers_untouched() {
    let (f, _) = generate(7, 3, &[]);
    quantize(&f, "q.lsiq", &["--bits", "3", "--no-smooth"]);
    let before_bytes = std::fs::read(f.path("q.lsiq")).unwrap();
    let calib_bytes = std::fs::read(f.path("calib.txt")).unwrap();
    let (q, r, c, e, o) = (f.path("q.lsiq"), f.path("model.lsiq"), f.path("calib.txt"), f.path("eval.txt"), f.path("ft.lsiq"));
    let base = ["finetune", "--model", p(&q), "--reference", p(&r), "--data", p(&c), "--out", p(&o), "--epochs", "2"];
    let mut args = base.to_vec();
    args.extend_from_slice(&["--heldout", p(&e), "--finetune-last", "2"]);
    let v = ok_json(&args);
    assert_eq!(v["first_layer"], 1);
    assert!(v["heldout_ppl_delta"].is_f64());
    let (old, new) = (read_model(&q).unwrap(), read_model(&o).unwrap());
    assert_eq!(tensors(&old, 0), tensors(&new, 0));
    assert_eq!(old.embedding, new.embedding);
    assert_eq!(std::fs::read(&q).unwrap(), before_bytes);
    assert_eq!(std::fs::read(&c).unwrap(), calib_bytes);

    for bad in ["0", "4"] {
        let mut args = base.to_vec();
        args.extend_from_slice(&["--finetune-last", bad]);
        assert_eq!(run(&args).status.code(), Some(2), "--finetune-last {bad}");
    }
}

#[test]
fn ablation_rows() {
    let (f, _) = generate(8, 2, &[]);
    let (m, c) = (f.path("model.lsiq"), f.path("calib.txt"));
    let v = ok_json(&[
        "ablate", "--model", p(&m), "--calib", p(&c), "--bits", "2", "--group-size", "16", "--epochs", "2",
        "--square-n-set", "0,8",
    ]);
    let rows = v["rows"].as_array().unwrap();
    let row = |name: &str| rows.iter().find(|r| r["variant"] == name).unwrap_or_else(|| panic!("{name}"));
    let loss = |name: &str| row(name)["mean_final_loss"].as_f64().unwrap();
    assert!(loss("full") <= loss("no-lsi") * 1.05, "{} vs {}", loss("full"), loss("no-lsi"));
    assert_eq!(row("square-n=0")["square_n"], 0);
    assert_eq!(row("square-n=8")["square_n"], 8);
    assert_ne!(loss("square-n=0"), loss("square-n=8"));
}
