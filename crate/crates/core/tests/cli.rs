use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn factspace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_factspace"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = factspace(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn error_line(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not json ({e}): {line}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Synth {
    _dir: tempfile::TempDir,
    root: PathBuf,
    dataset: PathBuf,
    words: PathBuf,
}

fn synth() -> Synth {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    ok(&[
        "synth",
        "--seed",
        "3",
        "--out-dir",
        s(&data),
        "--facts-per-order",
        "8,24,40",
        "--images-per-fact",
        "8",
        "--holdout-share",
        "0.2",
    ]);
    Synth {
        dataset: data.join("dataset.jsonl"),
        words: data.join("words.txt"),
        root,
        _dir: dir,
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline_model2() {
    let d = synth();
    let (model, emb, ranked) = (d.root.join("m2"), d.root.join("emb"), d.root.join("ranked"));
    ok(&[
        "train",
        "--seed",
        "1",
        "--model",
        "model2",
        "--dataset",
        s(&d.dataset),
        "--words",
        s(&d.words),
        "--out-dir",
        s(&model),
        "--lr",
        "0.01",
        "--max-iters",
        "300",
    ]);
    for f in ["init.json", "checkpoint.json", "trace.csv", "config.json"] {
        assert!(model.join(f).exists(), "missing {f}");
    }
    ok(&[
        "embed",
        "--checkpoint",
        s(&model.join("checkpoint.json")),
        "--dataset",
        s(&d.dataset),
        "--words",
        s(&d.words),
        "--out-dir",
        s(&emb),
    ]);
    ok(&[
        "retrieve",
        "--embeddings",
        s(&emb.join("embeddings.jsonl")),
        "--out-dir",
        s(&ranked),
    ]);
    for f in [
        "metric1.jsonl",
        "metric2_order1.jsonl",
        "metric2_order2.jsonl",
        "metric2_order3.jsonl",
        "visual.jsonl",
        "facts.fsix",
    ] {
        assert!(ranked.join(f).exists(), "missing {f}");
    }

    let mut reports = Vec::new();
    for metric in ["1", "2"] {
        let out_dir = d.root.join(format!("eval{metric}"));
        let out = ok(&[
            "eval",
            "--dataset",
            s(&d.dataset),
            "--ranked-dir",
            s(&ranked),
            "--metric",
            metric,
            "--out-dir",
            s(&out_dir),
        ]);
        assert!(!out.stdout.is_empty());
        assert!(out_dir.join("buckets.csv").exists());
        let report = read_json(&out_dir.join("report.json"));
        assert_eq!(report["meta"]["model"], "model2");
        assert_eq!(report["meta"]["metric"], metric.parse::<u64>().unwrap());
        let top1 = report["language_view"]["top1"].as_f64().unwrap();
        assert!(top1 > 50.0, "metric {metric} top-1 {top1}");
        assert!(report["visual_view"]["overall"]["map"].as_f64().is_some());
        reports.push(out_dir.join("report.json"));
    }

    let summary = d.root.join("summary");
    let out = ok(&[
        "report",
        s(&reports[0]),
        s(&reports[1]),
        "--out-dir",
        s(&summary),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("model2"));
    let csv = std::fs::read_to_string(summary.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn cca_and_averaged_ablation() {
    let d = synth();
    let (cca, emb) = (d.root.join("cca"), d.root.join("emb"));
    ok(&[
        "train",
        "--seed",
        "1",
        "--model",
        "cca",
        "--dataset",
        s(&d.dataset),
        "--words",
        s(&d.words),
        "--out-dir",
        s(&cca),
    ]);
    assert_eq!(
        read_json(&cca.join("checkpoint.json"))["model"]["kind"],
        "cca"
    );
    ok(&[
        "embed",
        "--checkpoint",
        s(&cca.join("checkpoint.json")),
        "--dataset",
        s(&d.dataset),
        "--words",
        s(&d.words),
        "--out-dir",
        s(&emb),
    ]);
    let out = factspace(&[
        "retrieve",
        "--embeddings",
        s(&emb.join("embeddings.jsonl")),
        "--out-dir",
        s(&d.root.join("r")),
        "--representation",
        "averaged",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"], "validation");
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let d = synth();
    let model = d.root.join("m1");
    ok(&[
        "train",
        "--seed",
        "5",
        "--dataset",
        s(&d.dataset),
        "--words",
        s(&d.words),
        "--out-dir",
        s(&model),
        "--lr",
        "0",
        "--max-iters",
        "20",
    ]);
    let init = std::fs::read(model.join("init.json")).unwrap();
    let trained = std::fs::read(model.join("checkpoint.json")).unwrap();
    assert_eq!(init, trained);
}

#[test]
fn toml_config_is_applied_and_flags_win() {
    let d = synth();
    let cfg = d.root.join("train.toml");
    std::fs::write(
        &cfg,
        "[train]\nmax_iters = 7\nbase_lr = 0.02\n\n[architecture]\ntrunk = [16]\n",
    )
    .unwrap();
    let model = d.root.join("m");
    ok(&[
        "train",
        "--seed",
        "2",
        "--dataset",
        s(&d.dataset),
        "--words",
        s(&d.words),
        "--out-dir",
        s(&model),
        "--config",
        s(&cfg),
        "--lr",
        "0.005",
    ]);
    let snapshot = read_json(&model.join("config.json"));
    assert_eq!(snapshot["train"]["max_iters"], 7);
    assert_eq!(snapshot["train"]["base_lr"], 0.005);
    let trace = std::fs::read_to_string(model.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 8);
}

#[test]
fn exit_codes() {
    let d = synth();
    let out = factspace(&[
        "train",
        "--seed",
        "1",
        "--dataset",
        s(&d.root.join("nope.jsonl")),
        "--words",
        s(&d.words),
        "--out-dir",
        s(&d.root.join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["code"], 2);

    let out = factspace(&["synth", "--out-dir", s(&d.root.join("y"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(error_line(&out)["message"]
        .as_str()
        .unwrap()
        .contains("--seed"));

    let out = factspace(&[
        "eval",
        "--dataset",
        s(&d.dataset),
        "--ranked-dir",
        "r",
        "--metric",
        "3",
        "--out-dir",
        "o",
    ]);
    assert_eq!(out.status.code(), Some(3));

    let out = factspace(&[
        "train",
        "--seed",
        "1",
        "--dataset",
        s(&d.dataset),
        "--words",
        s(&d.words),
        "--out-dir",
        s(&d.root.join("z")),
        "--lr",
        "1e9",
        "--max-iters",
        "50",
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_line(&out)["error"], "divergence");
}
