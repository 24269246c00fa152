use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn localign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_localign"))
        .args(args)
        .env_remove("LOCALIGN_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap()
}

/// Small dataset plus a two-epoch train config.
fn setup(tmp: &Path) -> (PathBuf, PathBuf) {
    let data_cfg = write(tmp, "data.json", r#"{"schema_version": 1, "samples": 40, "seed": 3}"#);
    let train_cfg = write(tmp, "train.json", r#"{"schema_version": 1, "max_epochs": 2, "batch_size": 8}"#);
    let data = tmp.join("d0");
    ok(&localign(&["gen-data", "--config", s(&data_cfg), "--out", s(&data)]));
    (data, train_cfg)
}

#[test]
fn generate_train_diagnose_probe() {
    let tmp = TempDir::new().unwrap();
    let (data, train_cfg) = setup(tmp.path());
    assert!(data.join("manifest.json").exists());
    assert_eq!(manifest(&data)["command"], "gen-data");

    let run = tmp.path().join("t0");
    ok(&localign(&["train", "--config", s(&train_cfg), "--data", s(&data), "--out", s(&run)]));
    for f in ["metrics.csv", "checkpoint.json", "params.bin", "optimizer.bin", "lr_trace.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 * 2);
    let m = manifest(&run);
    assert_eq!(m["config"]["max_epochs"], 2);
    assert!(m["artifacts"].as_array().unwrap().iter().any(|a| a == "metrics.csv"));
    assert!(m["versions"]["localign"].is_string());

    ok(&localign(&["diagnose", "--checkpoint", s(&run), "--suite", "all"]));
    let diag = run.join("diagnostics");
    for f in ["smoothness", "std", "alignment", "weights"] {
        assert!(diag.join(format!("{f}_run_test.csv")).exists(), "{f}");
    }
    let retrieval: Value =
        serde_json::from_str(&fs::read_to_string(diag.join("retrieval_run_test.json")).unwrap()).unwrap();
    let top1 = retrieval["top1_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));

    let probe_cfg = write(tmp.path(), "probe.json", r#"{"schema_version": 1, "epochs": 20}"#);
    ok(&localign(&["probe", "--checkpoint", s(&run), "--config", s(&probe_cfg), "--baseline"]));
    let result: Value =
        serde_json::from_str(&fs::read_to_string(run.join("probe/probe.json")).unwrap()).unwrap();
    let dice = result["micro_dice"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&dice));
    assert_eq!(result["curve"].as_array().unwrap().len(), 20);
    assert!(run.join("probe/probe_baseline.json").exists());
}

#[test]
fn single_suite_writes_only_that_file() {
    let tmp = TempDir::new().unwrap();
    let (data, train_cfg) = setup(tmp.path());
    let run = tmp.path().join("t0");
    ok(&localign(&["train", "--config", s(&train_cfg), "--data", s(&data), "--out", s(&run)]));
    let out = tmp.path().join("diag");
    ok(&localign(&[
        "diagnose", "--checkpoint", s(&run), "--data", s(&data), "--suite", "std", "--split", "validation", "--out", s(&out),
    ]));
    let mut files: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["run_manifest.json", "std_run_validation.csv"]);
}

#[test]
fn ablation_is_recorded_in_manifest() {
    let tmp = TempDir::new().unwrap();
    let (data, train_cfg) = setup(tmp.path());
    let run = tmp.path().join("t1");
    ok(&localign(&[
        "train", "--config", s(&train_cfg), "--data", s(&data), "--out", s(&run), "--ablate", "no_local",
    ]));
    let m = manifest(&run);
    assert_eq!(m["config"]["ablations"]["no_local"], true);
    assert_eq!(m["summary"]["effective_loss"]["mu"], 0.0);
    assert_eq!(m["summary"]["effective_loss"]["nu"], 0.0);
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let tmp = TempDir::new().unwrap();
    let (data, train_cfg) = setup(tmp.path());
    let runs: Vec<PathBuf> = ["a", "b"].iter().map(|n| tmp.path().join(n)).collect();
    for r in &runs {
        ok(&localign(&["train", "--config", s(&train_cfg), "--data", s(&data), "--out", s(r), "--seed", "5"]));
    }
    let a = fs::read(runs[0].join("metrics.csv")).unwrap();
    let b = fs::read(runs[1].join("metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(manifest(&runs[0])["seed"], 5);
    assert_eq!(manifest(&runs[0])["config"]["model"]["seed"], 5);
}

#[test]
fn default_output_root_comes_from_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "data.json", r#"{"schema_version": 1, "samples": 20}"#);
    let out = Command::new(env!("CARGO_BIN_EXE_localign"))
        .args(["gen-data", "--config", s(&cfg), "--seed", "9"])
        .env("LOCALIGN_OUT_ROOT", tmp.path().join("root"))
        .output()
        .unwrap();
    ok(&out);
    assert!(tmp.path().join("root/data-seed9/manifest.json").exists());
}

#[test]
fn grad_check_passes() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("gc");
    ok(&localign(&["grad-check", "--out", s(&out)]));
    assert_eq!(manifest(&out)["summary"]["passes"], true);
}

fn fails_with_one_line(out: &Output) -> String {
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(err.starts_with("error: "), "{err}");
    err
}

#[test]
fn errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    let out = localign(&["train", "--bogus"]);
    let err = fails_with_one_line(&out);
    assert!(err.contains("Usage"), "{err}");

    let out = localign(&["gen-data", "--config", s(&tmp.path().join("missing.json"))]);
    assert_eq!(fails_with_one_line(&out).lines().count(), 1);

    let typo = write(tmp.path(), "typo.json", r#"{"schema_version": 1, "sampels": 10}"#);
    let out = localign(&["gen-data", "--config", s(&typo), "--out", s(&tmp.path().join("x"))]);
    let err = fails_with_one_line(&out);
    assert!(err.contains("sampels"), "{err}");

    let bad = write(tmp.path(), "train.json", r#"{"schema_version": 1}"#);
    let out = localign(&["train", "--config", s(&bad), "--data", s(&tmp.path().join("nodata"))]);
    assert_eq!(fails_with_one_line(&out).lines().count(), 1);

    let out = localign(&["train", "--config", s(&bad), "--data", s(tmp.path()), "--ablate", "no_such_flag"]);
    fails_with_one_line(&out);

    let out = localign(&[]);
    assert_eq!(out.status.code(), Some(1));
}
