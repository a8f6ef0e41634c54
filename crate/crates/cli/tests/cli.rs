use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sparse_lpv::pipeline::RunConfig;

fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::default();
    cfg.experiment = cfg.experiment.clone().with_sample_rate(5.0);
    cfg.estimator.nodal.count = 20;
    cfg.estimator.nodal.spacing = 2.5;
    cfg.monte_carlo.n_runs = 2;
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_value().to_string()).unwrap();
    path
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparse-lpv"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run(&["simulate", "--seed", "3"], &cfg, &a));
    ok(&run(&["simulate", "--seed", "3"], &cfg, &b));
    assert_eq!(fs::read(a.join("dataset.csv")).unwrap(), fs::read(b.join("dataset.csv")).unwrap());
    let c = dir.path().join("c");
    ok(&run(&["simulate", "--seed", "4"], &cfg, &c));
    assert_ne!(fs::read(a.join("dataset.csv")).unwrap(), fs::read(c.join("dataset.csv")).unwrap());
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = run(&["order"], &cfg, &dir.path().join("empty"));
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("simulate"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = run(&["simulate", "--set", "estimator.gamma_typo=1"], &cfg, &dir.path().join("x"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gamma_typo"));
}

#[test]
fn stages_chain_through_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    for stage in ["simulate", "order", "sched", "detect", "refit"] {
        ok(&run(&[stage], &cfg, &out));
    }
    for file in [
        "dataset.csv",
        "order.json",
        "order_scores.csv",
        "sched.json",
        "tau_matrix.csv",
        "structure.json",
        "refit.json",
        "refit_coefficients.csv",
    ] {
        assert!(out.join(file).is_file(), "{file} missing");
    }
}

#[test]
fn monte_carlo_is_deterministic_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run(&["mc", "--workers", "1"], &cfg, &a));
    ok(&run(&["mc", "--workers", "2"], &cfg, &b));
    for file in ["mc_runs.csv", "mc_summary.csv", "mc_structures.csv"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file} differs");
    }
}
