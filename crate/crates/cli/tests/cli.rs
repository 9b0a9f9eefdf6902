use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use bldc_core::Dataset;
use serde_json::Value;
use tempfile::TempDir;

const TOY: &str = r#"
run_id = "toy"
size = 7
m_train = 5
m_test = 5
n_demos = 1
horizon = 60
policy_seeds = [0, 1]
eval_epochs = [1]

[hyper]
epochs = 3
"#;

fn bldc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bldc"))
        .current_dir(dir)
        .env_remove("BLDC_DATA_DIR")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn toy_dir() -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("toy.toml"), TOY).unwrap();
    dir
}

#[test]
fn help_and_version_exit_zero() {
    let dir = TempDir::new().unwrap();
    assert_eq!(bldc(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(bldc(dir.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(bldc(dir.path(), &["frobnicate"]).status.code(), Some(1));
}

#[test]
fn blindfolded_demos_are_longer_on_the_same_split() {
    let dir = toy_dir();
    let p = dir.path();
    ok(&bldc(p, &["gen", "--config", "toy.toml", "--out", "toy.tasksplit"]));
    let common = ["--config", "toy.toml", "--split", "toy.tasksplit"];
    let inf: Value = serde_json::from_str(&ok(&bldc(
        p,
        &[&["demo", "--expert", "informed", "--out", "inf.bldc"], &common[..]].concat(),
    )))
    .unwrap();
    let bf: Value = serde_json::from_str(&ok(&bldc(
        p,
        &[&["demo", "--expert", "blindfolded", "--out", "bf.bldc"], &common[..]].concat(),
    )))
    .unwrap();
    let steps = |v: &Value| v["total_steps"].as_u64().unwrap();
    assert!(steps(&bf) > steps(&inf), "bf {} vs informed {}", steps(&bf), steps(&inf));
    assert_eq!(Dataset::load(p.join("bf.bldc")).unwrap().total_steps() as u64, steps(&bf));

    let ext: Value = serde_json::from_str(&ok(&bldc(
        p,
        &[&["demo", "--expert", "informed", "--match-steps", "bf.bldc", "--out", "ext.bldc"], &common[..]]
            .concat(),
    )))
    .unwrap();
    assert!(steps(&ext) >= steps(&bf));
    assert!(ext["tasks"].as_u64().unwrap() > inf["tasks"].as_u64().unwrap());
}

#[test]
fn gen_into_a_data_dir_serves_the_split() {
    let dir = toy_dir();
    let out = ok(&bldc(
        dir.path(),
        &["gen", "--config", "toy.toml", "--data-dir", "data", "--split-id", "pilot"],
    ));
    let path = dir.path().join("data/splits/pilot.tasksplit");
    assert_eq!(out.trim(), Path::new("data/splits/pilot.tasksplit").display().to_string());
    let split = bldc_service::store::load_split(&dir.path().join("data"), "pilot").unwrap();
    assert_eq!(split.train.len(), 5);
    assert!(path.exists());
}

#[test]
fn train_eval_report_round_trip() {
    let dir = toy_dir();
    let p = dir.path();
    let start = Instant::now();
    ok(&bldc(p, &["train", "--config", "toy.toml", "--out", "run"]));
    assert!(start.elapsed() < Duration::from_secs(60));

    let run = p.join("run");
    for f in ["config.toml", "policy-seed0.bin", "policy-seed1.bin", "curve.csv", "eval.csv", "summary.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    // epochs {1, 3} x {train, test} x 2 seeds
    let curve = fs::read_to_string(run.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 2 * 2 * 2);
    assert!(curve.starts_with("run_id,seed,epoch,split,success,loss"));

    ok(&bldc(
        p,
        &["eval", "--config", "toy.toml", "--policy", "run/policy-seed1.bin", "--epoch", "3", "--out", "eval.csv"],
    ));
    let rows = bldc_core::evalsuite::read_csv(fs::File::open(p.join("eval.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.seed == 1 && r.epoch == 3));
    // Deterministic greedy rollouts: matches the training run's own final evaluation.
    let trained = bldc_core::evalsuite::read_csv(fs::File::open(run.join("eval.csv")).unwrap()).unwrap();
    let finals: Vec<_> = trained.iter().filter(|r| r.seed == 1 && r.epoch == 3).collect();
    assert_eq!(finals.len(), rows.len());
    for (a, b) in finals.iter().zip(&rows) {
        assert_eq!((a.task_seed, a.success, a.steps), (b.task_seed, b.success, b.steps));
    }

    ok(&bldc(p, &["report", "--input", "run/curve.csv", "--out", "rep"]));
    let svg = fs::read_to_string(p.join("rep/curves.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    let table = fs::read_to_string(p.join("rep/table.md")).unwrap();
    assert!(table.contains("| toy | 3 | 2 |"));

    ok(&bldc(p, &["report", "--input", "run/eval.csv", "--out", "rep2"]));
    assert!(fs::read_to_string(p.join("rep2/table.md")).unwrap().contains("coverage"));
}

#[test]
fn empty_report_input_is_a_user_error() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("empty.csv"), "").unwrap();
    let out = bldc(dir.path(), &["report", "--input", "empty.csv", "--out", "rep"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no data"));
    assert!(!dir.path().join("rep/curves.svg").exists());

    fs::write(dir.path().join("header.csv"), "run_id,seed,epoch,split,success,loss\n").unwrap();
    let out = bldc(dir.path(), &["report", "--input", "header.csv", "--out", "rep"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no data"));
}

#[test]
fn bad_config_is_a_user_error() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("bad.toml"), "m_train = 0\n").unwrap();
    let out = bldc(dir.path(), &["gen", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.toml") && err.contains("m_train"), "{err}");

    fs::write(dir.path().join("typo.toml"), "size = \"big\"\n").unwrap();
    let out = bldc(dir.path(), &["gen", "--config", "typo.toml"]);
    assert_eq!(out.status.code(), Some(1));

    let out = bldc(dir.path(), &["gen", "--blindfold", "fov:-3"]);
    assert_eq!(out.status.code(), Some(1));
    let out = bldc(dir.path(), &["demo", "--config", "missing.toml"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn theory_reports_both_experts() {
    let dir = toy_dir();
    let out: Value = serde_json::from_str(&ok(&bldc(
        dir.path(),
        &["theory", "--config", "toy.toml", "--tasks", "4"],
    )))
    .unwrap();
    let experts = out["experts"].as_array().unwrap();
    assert_eq!(experts.len(), 2);
    let mi = |i: usize| experts[i]["mutual_information"].as_f64().unwrap();
    // Four distinct deterministic trajectories: at most ln 4 nats.
    assert!(mi(0) > 0.0 && mi(0) <= 4f64.ln() + 1e-9);
    assert_eq!(experts[0]["gen_error"].as_f64().unwrap(), 0.0);
    assert!(experts[1]["gen_error"].as_f64().unwrap() > 0.0);
}
