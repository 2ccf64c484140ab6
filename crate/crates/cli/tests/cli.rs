use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[experiment]
manual_x = [2.0, 5.0, 9.0]
objective_n_eval = 3
final_n_eval = 10
sweep_n = 4

[experiment.train_default]
total_epochs = 12
batch_size = 32
minibatch_size = 32
update_epochs = 2
hidden = 4
eval_every = 6
eval_n = 2
env = { base_tiles = 60, max_steps = 80 }

[experiment.train_curriculum]
total_epochs = 12
batch_size = 32
minibatch_size = 32
update_epochs = 2
hidden = 4
eval_every = 6
eval_n = 2
env = { base_tiles = 60, max_steps = 80 }

[experiment.search]
max_epoch = 12
n_iterations = 2
bounds = { lower = [1.0, 4.0, 8.0], upper = [3.0, 6.0, 10.0] }
"#;

/// Full-scale schedule with a tiny learner, so full-length runs stay cheap.
const CHEAP_PAPER: &str = r#"
[run]
profile = "paper"

[experiment]
objective_n_eval = 2
final_n_eval = 2

[experiment.train_curriculum]
batch_size = 8
minibatch_size = 8
update_epochs = 1
hidden = 2
eval_every = 1000
eval_n = 1
env = { base_tiles = 50, max_steps = 40 }
"#;

fn curbo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curbo")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = curbo(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("small.toml");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn rerun_from_manifest_config_is_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let a = tmp.path().join("a");
    ok(&["--mode", "train-manual", "--config", &cfg, "--seed", "3", "--out", a.to_str().unwrap()]);
    let b = tmp.path().join("b");
    let saved = a.join("config.toml");
    ok(&["--config", saved.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma, mb);
    assert_eq!(ma["seed"], 3);
    for f in ["curve.csv", "policy.ckpt", "table.csv", "curriculum.json", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let table = fs::read_to_string(a.join("table.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn evaluate_and_sweep_write_expected_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let train = tmp.path().join("train");
    ok(&["--mode", "train-default", "--config", &cfg, "--out", train.to_str().unwrap()]);
    let ckpt = train.join("policy.ckpt");

    let ev = tmp.path().join("eval");
    ok(&["--mode", "evaluate", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--set", "hard", "--n", "7", "--out", ev.to_str().unwrap()]);
    let table = fs::read_to_string(ev.join("table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(
        lines[0],
        "training_scheme,test_setting,average_reward,reward_std,collision_obstacle_ratio,tiles_visited,time_on_grass,collisions,n_eval"
    );
    assert!(lines[1].starts_with("policy,hard,") && lines[1].ends_with(",7"));

    let sw = tmp.path().join("sweep");
    ok(&["--mode", "sweep", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--out", sw.to_str().unwrap()]);
    let sweep = fs::read_to_string(sw.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 6);
    assert!(sweep.lines().nth(5).unwrap().starts_with("policy,5,0.71,0.13,"));
}

#[test]
fn small_search_writes_report_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("bo");
    ok(&["--mode", "search-bo", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let report = fs::read_to_string(out.join("search_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 8);
    assert!(out.join("trials/trial_06_curve.csv").exists());
    let first = manifest(&out);
    ok(&["--mode", "search-bo", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(manifest(&out), first);
}

#[test]
fn paper_manual_curriculum_changepoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CHEAP_PAPER);
    let out = tmp.path().join("manual");
    ok(&["--mode", "train-manual", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("curriculum.json")).unwrap()).unwrap();
    let starts: Vec<u64> = c["segments"].as_array().unwrap().iter().map(|s| s["start_epoch"].as_u64().unwrap()).collect();
    assert_eq!(starts, vec![0, 198, 396, 775]);
}

#[test]
fn paper_search_records_nineteen_trials() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CHEAP_PAPER);
    let out = tmp.path().join("bo");
    ok(&["--mode", "search-bo", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let result: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("search_result.json")).unwrap()).unwrap();
    let trials = result["trials"].as_array().unwrap();
    assert_eq!(trials.len(), 19);
    assert_eq!(trials.iter().filter(|t| t["phase"] == "warmup").count(), 5);
}

#[test]
fn usage_errors_name_the_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let bad = write_config(tmp.path(), "[experiment.search]\nlambda_ucbb = 2.0\n");
    let r = curbo(&["--mode", "train-default", "--config", &bad, "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("lambda_ucbb"));

    let r = curbo(&["--mode", "evaluate", "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("checkpoint"));

    let missing = tmp.path().join("missing.ckpt");
    let r = curbo(&["--mode", "evaluate", "--checkpoint", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("missing.ckpt"));

    let r = curbo(&["--mode", "fly", "--out", out.to_str().unwrap()]);
    assert!(!r.status.success());
}
