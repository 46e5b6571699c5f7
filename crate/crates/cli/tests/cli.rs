use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_wholebody");

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).env_remove("WHOLEBODY_OUT_DIR").args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = run_in(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// A model and a small dataset inside a fresh directory.
fn workspace(n: usize) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["model", "--out", "m"]);
    ok(dir.path(), &["gen", "--model", "m/model.json", "--n", &n.to_string(), "--out", "g"]);
    let (m, g) = (dir.path().join("m/model.json"), dir.path().join("g/dataset.ndjson"));
    (dir, m, g)
}

#[test]
fn empty_generation_is_valid() {
    let (dir, _, data) = workspace(0);
    let text = fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), 1);
    let header: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["count"], 0);
    let manifest = json(dir.path().join("g/manifest.json"));
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["outputs"][0], "dataset.ndjson");
    assert!(manifest["inputs"][0].as_str().unwrap().ends_with("model.json"));
}

#[test]
fn single_distance_bench_is_one_row() {
    let (dir, _, _) = workspace(0);
    ok(dir.path(), &["bench-distance", "--model", "m/model.json", "--distances", "3", "--n-per-bucket", "1", "--camera-kinds", "d2s", "--out", "b"]);
    let csv = fs::read_to_string(dir.path().join("b/report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "{csv}");
    assert!(lines[1].starts_with("d2s,3,1,"));
}

#[test]
fn failures_report_json_and_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["gen", "--model", "missing.json", "--out", "g"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "configuration");
    assert!(!dir.path().join("g").exists());

    let (dir, _, _) = workspace(2);
    let out = run_in(dir.path(), &["eval", "--model", "m/model.json", "--dataset", "g/dataset.ndjson"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"]["message"].as_str().unwrap().contains("exactly one"));
}

#[test]
fn flags_override_the_config_file() {
    let (dir, _, _) = workspace(0);
    fs::write(dir.path().join("gen.json"), r#"{"n": 5, "bank": {"angle_fraction": 0.3}, "camera": {"azimuths": 4}}"#).unwrap();
    ok(dir.path(), &["gen", "--config", "gen.json", "--model", "m/model.json", "--n", "3", "--out", "c"]);
    let manifest = json(dir.path().join("c/manifest.json"));
    assert_eq!(manifest["config"]["n"], 3);
    assert_eq!(manifest["config"]["bank"]["angle_fraction"], 0.3);
    assert_eq!(manifest["config"]["camera"]["azimuths"], 4);
    let text = fs::read_to_string(dir.path().join("c/dataset.ndjson")).unwrap();
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn output_directory_defaults_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    let out = Command::new(BIN).current_dir(dir.path()).env("WHOLEBODY_OUT_DIR", &target).arg("model").output().unwrap();
    assert!(out.status.success());
    assert!(target.join("model.json").exists() && target.join("manifest.json").exists());
}

#[test]
fn fit_replays_identically_with_more_jobs() {
    let (dir, _, data) = workspace(3);
    let before = fs::read(&data).unwrap();
    ok(dir.path(), &["fit", "--model", "m/model.json", "--dataset", "g/dataset.ndjson", "--camera-kinds", "d2s,weak", "--stage2-iterations", "30", "--out", "f"]);
    ok(dir.path(), &["replay", "--manifest", "f/manifest.json", "--out", "f2", "--jobs", "3"]);
    for name in ["fit_results.json", "fits.csv", "report.csv"] {
        assert_eq!(fs::read(dir.path().join("f").join(name)).unwrap(), fs::read(dir.path().join("f2").join(name)).unwrap(), "{name}");
    }
    let (a, b) = (json(dir.path().join("f/manifest.json")), json(dir.path().join("f2/manifest.json")));
    assert_eq!(a["config"], b["config"]);
    assert_eq!((a["jobs"].as_u64(), b["jobs"].as_u64()), (Some(1), Some(3)));
    assert_eq!(fs::read(&data).unwrap(), before);

    let fits = json(dir.path().join("f/fit_results.json"));
    assert_eq!(fits.as_array().unwrap().len(), 6);
    ok(dir.path(), &["eval", "--model", "m/model.json", "--dataset", "g/dataset.ndjson", "--fit-results", "f/fit_results.json", "--camera-kind", "weak", "--out", "e"]);
    let report = json(dir.path().join("e/eval.json"));
    assert_eq!(report["report"]["n_samples"], 3);
    assert_eq!(report["skipped"], 0);
}

#[test]
fn single_sample_fit_keeps_its_index() {
    let (dir, _, _) = workspace(4);
    ok(dir.path(), &["fit", "--model", "m/model.json", "--dataset", "g/dataset.ndjson", "--index", "2", "--stage2-iterations", "10", "--out", "f"]);
    let fits = json(dir.path().join("f/fit_results.json"));
    assert_eq!(fits[0]["index"], 2);
    let out = run_in(dir.path(), &["fit", "--model", "m/model.json", "--dataset", "g/dataset.ndjson", "--index", "9", "--out", "f9"]);
    assert_eq!(out.status.code(), Some(1));
}
