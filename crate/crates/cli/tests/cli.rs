use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "model": {
    "kernel": {"form": "gaussian", "sigma": 1.0, "decay_c": 2.325, "decay_beta": 0.5},
    "rate": "2 + 0.3*sin(2*pi*xi1)"
  },
  "grids": {"torus_n": 32, "effective_n": 33},
  "experiment": {"eps": [0.125, 0.0625], "p": [-0.5, 0.0, 0.5]}
}"#;

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("run.json");
    std::fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spechomog"));
    cmd.args(args).env_remove("SPECHOMOG_THREADS");
    if let Some(t) = threads {
        cmd.env("SPECHOMOG_THREADS", t);
    }
    cmd.output().unwrap()
}

fn run_in(dir: &Path, experiment: &str, config: &Path, threads: Option<&str>) -> Output {
    let out = dir.join("out");
    run(
        &[experiment, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()],
        threads,
    )
}

#[test]
fn cell_h_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = run_in(dir.path(), "cell-h", &cfg, None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/cell-h.csv")).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    assert!(csv.lines().count() >= 4);
    let hash = manifest["config_hash"].as_str().unwrap();
    assert!(csv.lines().skip(1).all(|line| line.ends_with(hash) || line.contains(hash)));
    assert!(dir.path().join("out/config.schema.json").exists());
}

#[test]
fn verify_passes_and_is_deterministic_across_thread_counts() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let cfg_a = write_config(dir_a.path(), SMALL);
    let cfg_b = write_config(dir_b.path(), SMALL);
    let a = run_in(dir_a.path(), "verify", &cfg_a, Some("1"));
    let b = run_in(dir_b.path(), "verify", &cfg_b, Some("4"));
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(b.status.code(), Some(0), "{}", String::from_utf8_lossy(&b.stderr));
    let ca = std::fs::read(dir_a.path().join("out/verify.csv")).unwrap();
    let cb = std::fs::read(dir_b.path().join("out/verify.csv")).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn unknown_config_key_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("\"grids\"", "\"gridz\""));
    let out = run_in(dir.path(), "cell-h", &cfg, None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gridz"));
}

#[test]
fn eps_not_reciprocal_of_integer_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("[0.125, 0.0625]", "[0.3]"));
    let out = run_in(dir.path(), "direct", &cfg, None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("1/K"));
}

#[test]
fn missing_config_file_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), "cell-h", &dir.path().join("absent.json"), None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_thread_variable_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = run_in(dir.path(), "cell-h", &cfg, Some("zero"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_experiment_is_rejected() {
    let out = run(&["no-such-experiment", "--config", "x.json"], None);
    assert_ne!(out.status.code(), Some(0));
}
