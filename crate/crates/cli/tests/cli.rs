//! Runs the built binary the way a user would.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn small_scenario() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/small.txt")
}

fn stormcast(store: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stormcast"))
        .arg("--store")
        .arg(store)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn full_chain_on_the_small_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path();
    let scenario = small_scenario();
    let synth = ["synth", "--scenario", scenario.to_str().unwrap(), "--seed", "3"];
    let stages: [&[&str]; 8] = [
        &synth,
        &["detect", "--seed", "3"],
        &["track", "--seed", "3"],
        &["featurize", "--seed", "3"],
        &["train", "--seed", "3", "--model", "rfc", "--trees", "20"],
        &["evaluate", "--seed", "3", "--model", "rfc"],
        &["predict", "--seed", "3", "--model", "rfc"],
        &["report", "--seed", "3"],
    ];
    for args in stages {
        let out = stormcast(store, args);
        assert!(out.status.success(), "{args:?} failed: {}", stderr(&out));
        let line = stdout(&out);
        assert_eq!(line.lines().count(), 1, "{line}");
        assert!(line.starts_with(args[0]), "{line}");
    }
    for f in [
        "scenario/scenario.txt",
        "scenario/strikes.txt",
        "scenario/observations.txt",
        "scenario/transformers.txt",
        "track/tracks.txt",
        "track/forecasts.txt",
        "featurize/features.csv",
        "train/train.csv",
        "train/validation.csv",
        "train/smote_provenance.txt",
        "models/model.rfc",
        "evaluate/metrics.txt",
        "evaluate/confusion.csv",
        "predict/predictions.csv",
        "report/confusion.png",
        "report/confusion.txt",
        "manifests/synth.txt",
        "manifests/report.txt",
    ] {
        assert!(store.join(f).is_file(), "missing {f}");
    }
    assert!(std::fs::read_dir(store.join("detect")).unwrap().count() > 0);
    let metrics = std::fs::read_to_string(store.join("evaluate/metrics.txt")).unwrap();
    for key in ["model:", "samples:", "accuracy:", "auc:", "f1_micro:", "per_class_accuracy:"] {
        assert!(metrics.lines().any(|l| l.starts_with(key)), "{key} missing from\n{metrics}");
    }
    let predict = stormcast(store, &["predict", "--seed", "3"]);
    assert!(stdout(&predict).contains("samples/s"));
}

#[test]
fn mlp_training_writes_history_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path();
    let scenario = small_scenario();
    let config = store.join("pipeline.conf");
    std::fs::write(&config, "seed = 9\nmodel = mlp\nepochs = 5\nsmote = off\n").unwrap();
    let cfg = config.to_str().unwrap();
    for args in [
        vec!["synth", "--scenario", scenario.to_str().unwrap()],
        vec!["detect"],
        vec!["track"],
        vec!["featurize"],
        vec!["train"],
        vec!["evaluate"],
        vec!["report"],
    ] {
        let mut full = vec!["--config", cfg];
        full.extend(args);
        let out = stormcast(store, &full);
        assert!(out.status.success(), "{full:?}: {}", stderr(&out));
    }
    let history = std::fs::read_to_string(store.join("train/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 6);
    assert!(store.join("models/model.mlp").is_file());
    assert!(!store.join("train/smote_provenance.txt").exists());
    assert!(store.join("report/history.png").is_file());
    assert!(std::fs::read_to_string(store.join("evaluate/metrics.txt")).unwrap().starts_with("model: mlp\n"));
}

#[test]
fn missing_upstream_input_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = stormcast(dir.path(), &["featurize", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("missing input") && err.contains("frames"), "{err}");
    assert!(err.contains("stormcast synth"), "{err}");

    let out = stormcast(dir.path(), &["evaluate", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("validation.csv"), "{}", stderr(&out));
}

#[test]
fn unknown_subcommand_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = stormcast(dir.path(), &["forecast"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("Usage"), "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn seed_is_required() {
    let dir = tempfile::tempdir().unwrap();
    let out = stormcast(dir.path(), &["synth"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("seed is required"), "{}", stderr(&out));
}

#[test]
fn bad_parameters_are_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let out = stormcast(dir.path(), &["detect", "--seed", "1", "--radius=-2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("radius must be positive"), "{}", stderr(&out));
    let out = stormcast(dir.path(), &["train", "--seed", "1", "--model", "svm"]);
    assert!(stderr(&out).contains("model must be rfc or mlp"), "{}", stderr(&out));
}
