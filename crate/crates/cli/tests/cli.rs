use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d2d"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .arg("--quiet")
        .env_remove("D2D_CONFIG")
        .output()
        .expect("d2d runs")
}

fn summary(out: &Output) -> Value {
    let stdout = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(stdout.lines().last().unwrap_or("{}")).expect("one JSON line")
}

const SMALL: [&str; 8] = [
    "--set",
    "generator.n_trees=200",
    "--set",
    "features.regions=30",
    "--set",
    "train.epochs=2",
    "--set",
    "train.arch.hidden=8",
];

#[test]
fn gradcheck_small_run_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gradcheck", "--hidden", "8", "--k", "5", "--trees", "10"]);
    assert_eq!(out.status.code(), Some(0));
    let s = summary(&out);
    assert_eq!(s["command"], "gradcheck");
    assert_eq!(s["ok"], true);
}

#[test]
fn gradcheck_failure_exits_with_verification_code() {
    let dir = tempfile::tempdir().unwrap();
    // No finite-difference check meets a zero tolerance.
    let out = run(dir.path(), &["gradcheck", "--trees", "2", "--set", "gradcheck.tol=0.0"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(summary(&out)["ok"], false);
}

#[test]
fn missing_inputs_and_bad_config_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(summary(&out)["command"], "train");

    let out = run(dir.path(), &["show-config", "--set", "train.no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(dir.path(), &["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn show_config_reflects_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["show-config", "--seed", "11", "--set", "train.epochs=7"]);
    assert!(out.status.success());
    let cfg: toml::Table = String::from_utf8_lossy(&out.stdout).parse().unwrap();
    assert_eq!(cfg["seed"].as_integer(), Some(11));
    assert_eq!(cfg["train"]["epochs"].as_integer(), Some(7));
    assert_eq!(cfg["train"]["seed"].as_integer(), Some(11));
}

#[test]
fn small_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["simulate", "cluster-gps", "build-features", "build-prototypes", "make-trees", "split", "train", "eval"] {
        let mut args = vec![stage];
        args.extend_from_slice(&SMALL);
        let out = run(dir.path(), &args);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(summary(&out)["command"], stage);
    }
    for f in ["records.jsonl", "prototypes.json", "split/test.jsonl", "models/d2d_lstm.json", "reports/eval.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let out = run(dir.path(), &["generate", "--count", "5"]);
    assert_eq!(summary(&out)["trees"], 5);
    let out = run(dir.path(), &["compare", "--dot", "2"]);
    assert!(out.status.success());
    assert_eq!(summary(&out)["pairs"], 5);
    assert!(dir.path().join("reports/compare_dot").read_dir().unwrap().count() == 2);
}
