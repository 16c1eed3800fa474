//! Exit codes and outputs of the `semisup` binary.

use std::path::Path;
use std::process::{Command, Output};

fn semisup(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semisup")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL: &str = r#"{
  "train": {"epochs": 1},
  "data": {"num_classes": 4, "per_class": 6, "labeled_fraction": 0.34, "eval_per_class": 2},
  "seeds": [3]
}"#;

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    assert_eq!(semisup(&["train", "--config", "/nonexistent/x.json", "--out", out]).status.code(), Some(2));
    let unknown = write(dir.path(), "u.json", r#"{"train": {"tua": 0.1}}"#);
    assert_eq!(semisup(&["train", "--config", &unknown, "--out", out]).status.code(), Some(2));
    let bad = write(dir.path(), "b.json", r#"{"train": {"tau": -1.0}}"#);
    assert_eq!(semisup(&["train", "--config", &bad, "--out", out]).status.code(), Some(2));
    let malformed = write(dir.path(), "m.json", "{");
    assert_eq!(semisup(&["ablate", "--config", &malformed, "--out", out]).status.code(), Some(2));
    assert_eq!(semisup(&["train", "--seed", "abc"]).status.code(), Some(2));
    assert!(!Path::new(out).exists());
}

#[test]
fn verify_passes_and_detects_corruption() {
    let ok = semisup(&["verify"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let bad = semisup(&["verify", "--corrupt-gradient"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn gen_data_writes_manifest_and_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let r = semisup(&["gen-data", "--seed", "4", "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0));
    assert!(out.join("manifest.json").is_file());
    let pairs: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("pairs.json")).unwrap()).unwrap();
    assert!(!pairs.as_array().unwrap().is_empty());
}

#[test]
fn train_writes_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMALL);
    let out = dir.path().join("runs");
    let r = semisup(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let run = out.join("seed-3");
    for f in ["config.json", "manifest.json", "metrics.csv", "epochs.csv", "summary.json", "checkpoint.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert!(String::from_utf8_lossy(&r.stdout).starts_with("seed 3:"));
}

#[test]
fn ablate_single_seed_reports_four_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", SMALL);
    let out = dir.path().join("abl");
    let r = semisup(&["ablate", "--config", &cfg, "--seed", "9", "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.split(',').nth(1) == Some("9")));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    for (row, med) in rows.iter().zip(summary["medians"].as_array().unwrap()) {
        let top1: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(med[1].as_f64().unwrap(), top1);
    }
}
