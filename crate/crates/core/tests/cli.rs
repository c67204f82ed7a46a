use std::fs;
use std::process::{Command, Output};

use dacfl::config::ExperimentConfig;
use dacfl::metrics::{read_csv, METRICS_HEADER};

fn dacfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dacfl")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn uniform_matrix_prints_tenths() {
    let o = dacfl(&["matrix", "--n", "10", "--kind", "uniform"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert!(text.lines().all(|l| l.split(',').all(|v| v == "0.10000000000000001")));
}

#[test]
fn missing_config_exits_one_and_names_it() {
    let o = dacfl(&["train", "--config", "missing.cfg"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.cfg"));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "nodes=4\nmomentum=0.9\n").unwrap();
    let o = dacfl(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("momentum"), "{}", stderr(&o));
}

#[test]
fn train_with_defaults_writes_one_hundred_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = dacfl(&["train", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("# resolved config\nalgorithm=dacfl\nnodes=10\n"));

    let text = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().next(), Some(METRICS_HEADER));
    assert_eq!(read_csv(&out.join("metrics.csv")).unwrap().len(), 100);

    let eval = fs::read_to_string(out.join("final_eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 11);

    let resolved = fs::read_to_string(out.join("resolved_config.txt")).unwrap();
    let back = ExperimentConfig::from_text(&resolved).unwrap();
    assert_eq!(back.out, out);
    assert_eq!(back.rounds, 100);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "algorithm=dacfl\nrounds=50\nnodes=5\n").unwrap();
    let out = dir.path().join("o");
    let o = dacfl(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--rounds",
        "7",
        "--algorithm",
        "fedavg",
        "--bound-check",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = read_csv(&out.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r.var_acc == 0.0));
    let resolved = fs::read_to_string(out.join("resolved_config.txt")).unwrap();
    assert!(resolved.contains("algorithm=fedavg\nnodes=5\nrounds=7\n"));
    let bound = fs::read_to_string(out.join("bound_check.txt")).unwrap();
    assert!(bound.contains("holds=true"), "{bound}");
    assert_eq!(fs::read_to_string(out.join("final_eval.csv")).unwrap().lines().nth(1).unwrap().split(',').next(), Some("global"));
}

#[test]
fn infeasible_sparse_density_is_a_config_error() {
    let o = dacfl(&["train", "--nodes", "4", "--topology", "sparse", "--rounds", "1"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = dacfl(&["train", "--lr", "1e308", "--lr_decay", "1", "--rounds", "5", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("divergence at round"));
}

#[test]
fn consensus_demo_and_gradcheck() {
    let o = dacfl(&["consensus-demo", "--topology", "sparse"]);
    assert_eq!(o.status.code(), Some(0));
    let csv = String::from_utf8(o.stdout).unwrap();
    assert_eq!(csv.lines().count(), 601);

    let o = dacfl(&["gradcheck", "--draws", "10"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8(o.stdout).unwrap().ends_with("PASS\n"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(dacfl(&[]).status.code(), Some(1));
    assert_eq!(dacfl(&["matrix"]).status.code(), Some(1));
    assert_eq!(dacfl(&["--help"]).status.code(), Some(0));
}
