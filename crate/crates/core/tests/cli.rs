use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#""backbone": {"stage_channels": [4, 6], "stage_strides": [1, 2], "feature_dim": 8},
    "data": {"n_identities": 6, "source_test_identities": 5, "target_identities": 5}"#;

fn peca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peca")).args(args).output().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("peca-cli-{name}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn train_then_eval_on_dump() {
    let dir = scratch("roundtrip");
    let cfg = write(&dir, "cfg.json", &format!(r#"{{"epochs": 2, "iterations_per_epoch": 2, {SMALL}}}"#));
    let spec = write(&dir, "data.json", r#"{"n_identities": 6, "source_test_identities": 5, "target_identities": 5}"#);
    let run = dir.join("run");
    let out = peca(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "lpm.csv", "report.json", "checkpoint.bin"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().filter(|l| l.starts_with("epoch,")).count(), 2);

    let dump = dir.join("dump");
    let out = peca(&["gen-data", "--spec", &spec, "--out", dump.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let ckpt = run.join("checkpoint.bin");
    let from_dump = peca(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", dump.to_str().unwrap()]);
    let from_spec = peca(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", &spec]);
    assert!(from_dump.status.success(), "{}", String::from_utf8_lossy(&from_dump.stderr));
    assert_eq!(from_dump.stdout, from_spec.stdout);
    let scores: serde_json::Value = serde_json::from_slice(&from_dump.stdout).unwrap();
    assert_eq!(scores["source"].as_array().unwrap().len(), 3);
    assert_eq!(scores["target"].as_array().unwrap().len(), 1);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn contract_errors_exit_with_2() {
    let dir = scratch("contract");
    let unknown = write(&dir, "unknown.json", r#"{"lamda": 1.0}"#);
    assert_eq!(peca(&["train", "--config", &unknown, "--out", dir.to_str().unwrap()]).status.code(), Some(2));

    let one_source = write(
        &dir,
        "one.json",
        &format!(r#"{{"epochs": 1, {}}}"#, SMALL.replace(r#""n_identities""#, r#""k_source": 1, "n_identities""#)),
    );
    assert_eq!(peca(&["train", "--config", &one_source, "--out", dir.to_str().unwrap()]).status.code(), Some(2));

    let cfg = write(&dir, "cfg.json", "{}");
    let bad_setting = peca(&["ablate", "--config", &cfg, "--settings", "nope", "--out", dir.to_str().unwrap()]);
    assert_eq!(bad_setting.status.code(), Some(2));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn divergence_exits_with_3() {
    let dir = scratch("numerics");
    let cfg = write(
        &dir,
        "cfg.json",
        &format!(r#"{{"epochs": 2, "iterations_per_epoch": 3, "base_lr": 1e200, "warmup_epochs": 0, {SMALL}}}"#),
    );
    let out = peca(&["train", "--config", &cfg, "--out", dir.join("run").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged at iteration"));
    std::fs::remove_dir_all(&dir).ok();
}
