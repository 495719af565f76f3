use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "dataset": { "kind": "sines", "n": 200, "seq_len": 8, "features": 2 },
  "model": { "layers": 1, "heads": 2, "width": 8, "ff_width": 16 },
  "diffusion": { "steps": 10, "beta_start": 0.0001, "beta_end": 0.2 },
  "loss": { "lambda_ar": 1.0, "lambda_mmd": 1.0, "lambda_w": 0.1, "gp_lambda": 10.0 },
  "delta": 1,
  "epochs": { "stage1": 1, "stage2": 1, "stage3": 1 },
  "batch_size": 16,
  "lr": 0.003,
  "critic_updates_per_step": 1,
  "seed": 3,
  "eval": { "repeats": 1, "gru_steps": 10, "gru_lr": 0.001, "gru_batch": 16, "mmd_samples": 24 }
}"#;

fn timed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timed")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    assert_eq!(timed(&[]).status.code(), Some(2));
    assert_eq!(timed(&["train", "--config", &cfg, "--bogus"]).status.code(), Some(2));
    assert_eq!(timed(&["train", "--config", &cfg, "--stage", "4"]).status.code(), Some(2));
    let missing = timed(&["train"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("Usage"));
    assert_eq!(timed(&["eval", "--config", "/nonexistent/c.json"]).status.code(), Some(2));
}

#[test]
fn failures_print_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("\"delta\"", "\"lambda_typo\": 1, \"delta\""));
    let out = timed(&["gen-data", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1);
    let v: Value = serde_json::from_str(err.trim_end()).unwrap();
    assert_eq!(v["error"], "config");

    // stage 3 refuses to start before pretraining
    let cfg = write_config(dir.path(), TINY);
    let out = timed(&["train", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap(), "--stage", "3"]);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"], "stage");

    // sampling needs a checkpoint
    let out = timed(&["sample", "--config", &cfg, "--out", dir.path().join("empty").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_sample_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("run");
    let out = out_dir.to_str().unwrap();

    let v = stdout_json(&timed(&["gen-data", "--config", &cfg, "--out", out]));
    assert_eq!(v["shape"], serde_json::json!([200, 8, 2]));
    assert!(out_dir.join("dataset.bin").exists());

    let v = stdout_json(&timed(&["train", "--config", &cfg, "--out", out, "--stage", "all", "--seed", "11"]));
    assert_eq!(v["epochs"], serde_json::json!([1, 1, 1]));
    let written: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(written["seed"], 11);
    let log = fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 5);

    let v = stdout_json(&timed(&["sample", "--config", &cfg, "--out", out, "--seed", "11", "--n", "256"]));
    assert_eq!(v["shape"], serde_json::json!([256, 8, 2]));
    let csv = fs::read_to_string(out_dir.join("samples.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 4);
    assert_eq!(header[..2], ["sample_id", "t"]);
    assert!(header[2..].iter().all(|h| !h.is_empty()));
    assert_eq!(lines.count(), 256 * 8);

    // the seed is part of the checkpoint fingerprint
    assert_eq!(timed(&["train", "--config", &cfg, "--out", out]).status.code(), Some(1));

    let v = stdout_json(&timed(&["eval", "--config", &cfg, "--out", out, "--seed", "11"]));
    assert!(v["scores"]["discriminative"]["mean"].is_number());
    for f in ["scores.csv", "scores.json", "projection.csv", "projection.svg"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn ablate_writes_five_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("abl");
    stdout_json(&timed(&["ablate", "--config", &cfg, "--out", out_dir.to_str().unwrap()]));
    let mut rdr = csv::Reader::from_path(out_dir.join("ablation.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        ["variant", "discriminative_mean", "discriminative_std", "predictive_mean", "predictive_std"]
    );
    let variants: Vec<String> = rdr.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(variants, ["timed", "wo_asl", "wo_mmd", "wo_ma", "wo_wc"]);
}
