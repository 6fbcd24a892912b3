use std::path::{Path, PathBuf};
use std::process::Command;

use coe_core::train::{load_checkpoint, read_metrics, Split};
use serde_json::{json, Value};

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/shakespeare.txt").canonicalize().unwrap()
}

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn coe(args: &[&str]) -> Out {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = coe_cli::run(std::iter::once("coe").chain(args.iter().copied()), &mut out, &mut err);
    Out {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn json_line(s: &str) -> Value {
    serde_json::from_str(s.trim()).unwrap_or_else(|e| panic!("{e}: {s}"))
}

fn small_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "model": {"layers": 2, "hidden": 32, "heads": 2, "max_seq": 32,
                  "coe": {"n_experts": 4, "k": 2, "c": 2, "intermediate": 32}},
        "train": {"total_steps": 12, "batch_size": 2, "seq_len": 16, "eval_interval": 6,
                  "eval_sequences": 8, "precision": "f32", "lr": 1e-3},
        "data": {"path": corpus()},
    });
    merge(&mut cfg, extra);
    let path = dir.join("run.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn merge(base: &mut Value, extra: Value) {
    match (base, extra) {
        (Value::Object(b), Value::Object(e)) => {
            for (k, v) in e {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, e) => *b = e,
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let r = coe(&["train", "--config", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("nope.json"), "{}", r.stderr);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({"train": {"learning_rate": 1.0}}));
    let r = coe(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("learning_rate"), "{}", r.stderr);
}

#[test]
fn bad_arguments_exit_2_and_help_exits_0() {
    assert_eq!(coe(&["frobnicate"]).code, 2);
    assert_eq!(coe(&["count-combos", "--n", "64"]).code, 2);
    let help = coe(&["train", "--help"]);
    assert_eq!(help.code, 0);
    assert!(help.stdout.contains("\"warmup_fraction\": 0.1"));
}

#[test]
fn train_writes_outputs_and_eval_reproduces_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = small_config(dir.path(), json!({"analysis": {"out_dir": "heat"}}));
    let r = coe(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "5"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let summary = json_line(&r.stdout);
    assert_eq!(summary["step"], 12);

    for f in ["metrics.jsonl", "final.ckpt", "config.resolved.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let resolved: Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["seed"], 5);
    assert_eq!(resolved["model"]["coe"]["hidden"], 32);
    assert_eq!(resolved["train"]["weight_decay"], 0.01);
    assert_eq!(load_checkpoint(&out.join("final.ckpt")).unwrap().train.seed, 5);
    for l in 0..2 {
        assert!(dir.path().join(format!("heat/layer{l}.csv")).exists());
    }

    let records = read_metrics(&out.join("metrics.jsonl")).unwrap();
    let last_val = records.iter().rev().find(|r| r.split == Split::Val).unwrap();
    assert_eq!(last_val.step, 12);

    let csv_dir = dir.path().join("csv");
    let e = coe(&["eval", "--ckpt", s(&out.join("final.ckpt")), "--out", s(&csv_dir)]);
    assert_eq!(e.code, 0, "{}", e.stderr);
    let report = json_line(&e.stdout);
    assert_eq!(report["val_loss"].as_f64().unwrap(), last_val.loss);
    assert!(csv_dir.join("layer1.csv").exists());
}

#[test]
fn resume_from_the_cli_matches_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({}));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(coe(&["train", "--config", s(&cfg), "--out", s(&a)]).code, 0);
    let halted = coe(&["train", "--config", s(&cfg), "--out", s(&b), "--halt-at", "5"]);
    assert_eq!(json_line(&halted.stdout)["halted"], true);
    let resumed = coe(&["train", "--resume", s(&b.join("last.ckpt")), "--out", s(&b)]);
    assert_eq!(resumed.code, 0, "{}", resumed.stderr);
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert!(read(&a, "metrics.jsonl") == read(&b, "metrics.jsonl"));
    assert!(read(&a, "final.ckpt") == read(&b, "final.ckpt"));
}

#[test]
fn corrupt_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"\x10\0\0\0\0\0\0\0{not json").unwrap();
    let r = coe(&["eval", "--ckpt", s(&bad)]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("manifest"), "{}", r.stderr);
    assert_eq!(coe(&["eval", "--ckpt", s(&dir.path().join("absent.ckpt"))]).code, 2);
}

#[test]
fn count_combos_prints_exact_counts() {
    let r = coe(&["count-combos", "--n", "64", "--k", "4", "--c", "2"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v = json_line(&r.stdout);
    let text = v.to_string();
    assert!(text.contains("403702661376"), "{text}");
    assert!(text.contains("4426165368"), "{text}");
    assert_eq!(coe(&["count-combos", "--n", "64", "--k", "40", "--c", "2"]).code, 2);
}

#[test]
fn cost_model_compares_two_configs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    std::fs::write(&a, r#"{"model": {"coe": {"k": 4, "c": 2}}}"#).unwrap();
    std::fs::write(&b, r#"{"model": {"coe": {"k": 8, "c": 1}}}"#).unwrap();
    let r = coe(&["cost-model", "--config-a", s(&a), "--config-b", s(&b)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(json_line(&r.stdout).is_object());
    assert_eq!(coe(&["cost-model", "--config-a", s(&a), "--config-b", s(&dir.path().join("x.json"))]).code, 2);
}

#[test]
fn gradcheck_exit_codes() {
    let ok = coe(&["gradcheck"]);
    assert_eq!(ok.code, 0, "{}{}", ok.stdout, ok.stderr);
    let v = json_line(&ok.stdout);
    assert_eq!(v["pass"], true);
    assert!(v["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert!(v["per_component"].as_object().unwrap().contains_key("router"));

    assert_eq!(coe(&["gradcheck", "--samples", "0"]).code, 2);
    let bad = coe(&["gradcheck", "--inject-fault", "--samples", "50"]);
    assert_eq!(bad.code, 1);
    assert_eq!(json_line(&bad.stdout)["pass"], false);
}

#[test]
fn binary_reports_exit_codes() {
    let status = |args: &[&str]| Command::new(env!("CARGO_BIN_EXE_coe")).args(args).output().unwrap();
    let r = status(&["count-combos", "--n", "64", "--k", "8", "--c", "1"]);
    assert_eq!(r.status.code(), Some(0));
    assert_eq!(status(&["train"]).status.code(), Some(2));
}

#[test]
fn single_iteration_eval_warns_and_writes_empty_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({"model": {"coe": {"k": 2, "c": 1}}, "train": {"total_steps": 2}}));
    let out = dir.path().join("run");
    assert_eq!(coe(&["train", "--config", s(&cfg), "--out", s(&out)]).code, 0);
    let e = coe(&["eval", "--ckpt", s(&out.join("final.ckpt"))]);
    assert_eq!(e.code, 0, "{}", e.stderr);
    assert!(e.stderr.contains("warning"), "{}", e.stderr);
    let csv = std::fs::read_to_string(out.join("coactivation/layer0.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn one_iteration_ratio_is_one() {
    let r = coe(&["count-combos", "--n", "64", "--k", "8", "--c", "1"]);
    let v = json_line(&r.stdout);
    assert_eq!(v["ratio_decimal"], 1.0);
    assert_eq!(v["ratio_numerator"], v["ratio_denominator"]);
}
