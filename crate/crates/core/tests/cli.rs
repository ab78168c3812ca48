//! Drives the built binary end to end.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dessilbi::config::parse_config;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dessilbi"))
}

fn text(o: &Output) -> (String, String) {
    (String::from_utf8_lossy(&o.stdout).into_owned(), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_parse() {
    for name in ["blobs_mlp.toml", "sparse_linear.toml", "mnist_mlp.toml"] {
        let text = std::fs::read_to_string(configs_dir().join(name)).unwrap();
        parse_config(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn verify_reports_every_suite() {
    let o = bin().args(["verify"]).output().unwrap();
    let (out, err) = text(&o);
    assert_eq!(o.status.code(), Some(0), "{out}{err}");
    for suite in ["prox", "gradient", "equivalence", "monitor"] {
        assert!(out.lines().any(|l| l.starts_with("PASS") && l.contains(suite)), "{suite} missing from\n{out}");
    }
}

#[test]
fn zero_epoch_training_writes_the_initial_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = bin()
        .args(["train", "--config"])
        .arg(configs_dir().join("blobs_mlp.toml"))
        .args(["--set", "run.epochs=0", "--set", "run.checkpoint_epochs=[0]", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    let (stdout, err) = text(&o);
    assert_eq!(o.status.code(), Some(0), "{stdout}{err}");
    assert!(out.join("config.toml").is_file());
    let csv = std::fs::read_to_string(out.join("path.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
}

#[test]
fn missing_config_is_a_usage_error_naming_the_file() {
    let o = bin().args(["train", "--config", "/no/such/dir/exp.toml"]).output().unwrap();
    let (_, err) = text(&o);
    assert_eq!(o.status.code(), Some(1));
    assert!(err.contains("/no/such/dir/exp.toml"), "{err}");
}

#[test]
fn invalid_override_names_the_field() {
    let o = bin()
        .args(["train", "--config"])
        .arg(configs_dir().join("blobs_mlp.toml"))
        .args(["--set", "optimizer.kappa=0"])
        .output()
        .unwrap();
    let (_, err) = text(&o);
    assert_eq!(o.status.code(), Some(1));
    assert!(err.contains("optimizer.kappa"), "{err}");
}

#[test]
fn saved_runs_can_be_retrained_and_exported() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = bin()
        .args(["train", "--config"])
        .arg(configs_dir().join("blobs_mlp.toml"))
        .args(["--set", "run.epochs=6", "--set", "run.checkpoint_epochs=[0, 3]", "--out"])
        .arg(&run)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{:?}", text(&o));

    let o =
        bin().args(["retrain", "--run"]).arg(&run).args(["--mask-epoch", "3", "--rewind-epoch", "0"]).output().unwrap();
    let (out, err) = text(&o);
    assert_eq!(o.status.code(), Some(0), "{out}{err}");
    assert!(out.contains("density"), "{out}");
    assert!(run.join("retrain/summary.json").is_file());

    let o = bin().args(["path-export", "--run"]).arg(&run).args(["--format", "order"]).output().unwrap();
    let (out, _) = text(&o);
    assert_eq!(o.status.code(), Some(0));
    assert!(out.starts_with("layer,group,entry_epoch"), "{out}");

    // A mask epoch without a checkpoint is a runtime failure, not a panic.
    let o = bin().args(["retrain", "--run"]).arg(&run).args(["--mask-epoch", "2"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2), "{:?}", text(&o));
}
