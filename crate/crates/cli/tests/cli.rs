use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cignn_core::graph::load_dataset;

fn cignn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cignn")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const TINY: [&str; 8] = ["--count", "40", "--epochs", "4", "--gc-epochs", "2", "--batch-size", "8"];

fn run_ok(args: &[&str]) -> Output {
    let o = cignn(args);
    assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    o
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("sub/b.jsonl");
    for p in [&a, &b] {
        run_ok(&["generate", "--count", "1000", "--seed", "7", "--out", p.to_str().unwrap()]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let ds = load_dataset(&a).unwrap();
    assert_eq!(ds.len(), 1000);

    // A directory target gets the fixed file names.
    let d = dir.path().join("gen");
    run_ok(&["generate", "--count", "10", "--out", d.to_str().unwrap()]);
    assert_eq!(load_dataset(d.join("dataset.jsonl")).unwrap().len(), 10);
    let manifest = fs::read_to_string(d.join("manifest.txt")).unwrap();
    assert!(manifest.contains("count = 10"));
}

#[test]
fn generate_rejects_odd_count() {
    let dir = tempfile::tempdir().unwrap();
    let o = cignn(&["generate", "--count", "3", "--out", dir.path().join("d.jsonl").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("even"), "{}", stderr(&o));
}

#[test]
fn train_eval_explain_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let mut args = vec!["train", "--out", out_s];
    args.extend(TINY);
    run_ok(&args);
    for f in ["dataset.jsonl", "checkpoint.json", "history.csv", "report.json", "manifest.txt"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,stage,loss_vae,loss_causal,loss_ce,val_accuracy,hsic_alpha_beta");
    assert_eq!(lines.len(), 5);
    let report = json(&out.join("report.json"));
    assert_eq!(report["split"], serde_json::json!([32, 4, 4]));
    assert!(report["test"]["metrics"]["accuracy"].is_number());

    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("# config_hash = sha256:"));
    assert!(manifest.contains("# seed = 0"));
    assert!(manifest.starts_with("# cignn 0.1.0 (git-"));

    // The manifest alone reproduces the run byte for byte.
    let again = dir.path().join("again");
    run_ok(&[
        "train",
        "--config",
        out.join("manifest.txt").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    for f in ["checkpoint.json", "history.csv", "dataset.jsonl"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }

    let ck = out.join("checkpoint.json");
    let eval_dir = dir.path().join("eval");
    run_ok(&[
        "eval",
        "--config",
        out.join("manifest.txt").to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    let eval = json(&eval_dir.join("report.json"));
    assert_eq!(eval["result"]["metrics"], report["test"]["metrics"]);
    assert_eq!(eval["split"], "test");

    let ex_dir = dir.path().join("explain");
    run_ok(&[
        "explain",
        "--dataset",
        out.join("dataset.jsonl").to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
        "--split",
        "all",
        "--out",
        ex_dir.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(ex_dir.join("explanations.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 40);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(first["edges"].as_array().unwrap().len() >= 25);
    let ex_report = json(&ex_dir.join("report.json"));
    let auc = ex_report["explanation"]["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
}

#[test]
fn untrained_model_is_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_ok(&[
        "eval",
        "--count",
        "200",
        "--split",
        "all",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(stderr(&o).contains("untrained"));
    let acc = json(&dir.path().join("report.json"))["result"]["metrics"]["accuracy"]
        .as_f64()
        .unwrap();
    assert!((acc - 0.5).abs() <= 0.1, "{acc}");
}

#[test]
fn sweep_reports_each_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep", "--ratios", "0.5,0.8", "--out", dir.path().to_str().unwrap()];
    args.extend(TINY);
    let o = run_ok(&args);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("ratio"));
    let report = json(&dir.path().join("report.json"));
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0]["k"].as_u64(), rows[0]["l"].as_u64()), (Some(32), Some(32)));
    assert_eq!((rows[1]["k"].as_u64(), rows[1]["l"].as_u64()), (Some(51), Some(13)));
}

#[test]
fn config_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 4\nlearning_rate = 0.1\n").unwrap();
    let o = cignn(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("learning_rate") && err.contains("weight_decay"), "{err}");

    let o = cignn(&["train", "--epochs", "2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1, "gc_epochs > epochs is a usage error");

    let o = cignn(&["train", "--config", "/nonexistent/run.cfg", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/run.cfg"));
}

#[test]
fn missing_inputs_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = cignn(&["eval", "--count", "20", "--checkpoint", "/nonexistent/ck.json", "--out", out]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/ck.json"), "{}", stderr(&o));

    let o = cignn(&["train", "--dataset", "/nonexistent/d.jsonl", "--out", out]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/d.jsonl"), "{}", stderr(&o));

    let o = cignn(&["explain", "--out", out]);
    assert_eq!(code(&o), 1, "explain requires --checkpoint");
}

#[test]
fn divergence_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--lr", "1e12", "--out", dir.path().to_str().unwrap()];
    args.extend(TINY);
    let o = cignn(&args);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn help_and_version_succeed() {
    let o = run_ok(&["--version"]);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("cignn 0.1.0"));
    let o = run_ok(&["train", "--help"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("--gc-epochs"));
    assert_eq!(code(&cignn(&[])), 1);
}
