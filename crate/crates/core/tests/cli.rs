use std::path::Path;
use std::process::{Command, Output};

use tsgm::io::{load_checkpoint, load_episodes, load_graph, load_world, METRICS_HEADER};

const TINY: &[&str] = &[
    "--set",
    "data.tiers=[\"easy\"]",
    "--set",
    "data.train_per_tier=2",
    "--set",
    "data.val_per_tier=3",
    "--set",
    "model.hidden=4",
    "--set",
    "model.edge_dim=2",
    "--set",
    "model.attention_dim=4",
    "--set",
    "model.policy_hidden=4",
    "--set",
    "train.bc_epochs=2",
    "--set",
    "train.ppo_epochs=1",
    "--set",
    "train.ppo_rollouts=2",
    "--set",
    "train.rollout_max_steps=10",
    "--set",
    "eval.max_steps=30",
];

fn tsgm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsgm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tsgm(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn world_and_graph_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "4", "gen-world", "--out", "world.json"]);
    let world = load_world(&d.join("world.json")).unwrap();
    assert_eq!(world.seed(), load_world(&d.join("world.json")).unwrap().seed());

    ok(d, &["--seed", "4", "build-graph", "--world", "world.json", "--random-steps", "60", "--out", "a.json"]);
    ok(d, &["--seed", "4", "build-graph", "--world", "world.json", "--random-steps", "60", "--out", "b.json"]);
    let a = std::fs::read(d.join("a.json")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.json")).unwrap(), "same seed, same bytes");
    let (graph, meta) = load_graph(&d.join("a.json")).unwrap();
    assert!(graph.num_images() >= 1);
    assert_eq!(meta.seed, 4);

    std::fs::write(d.join("actions.json"), r#"["forward", "turn_left", "forward", "turn_right"]"#).unwrap();
    ok(d, &["build-graph", "--world", "world.json", "--actions", "actions.json", "--out", "c.json"]);
    assert!(load_graph(&d.join("c.json")).is_ok());

    std::fs::write(d.join("bad.json"), r#"["forward", "stop"]"#).unwrap();
    assert!(!tsgm(d, &["build-graph", "--world", "world.json", "--actions", "bad.json", "--out", "x.json"]).status.success());
}

#[test]
fn train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = TINY.to_vec();
    args.extend(["gen-episodes", "--out", "eps"]);
    ok(d, &args);
    let episodes = load_episodes(&d.join("eps/episodes.jsonl")).unwrap();
    assert_eq!(episodes.len(), 3);

    let mut args = TINY.to_vec();
    args.extend(["train", "--out", "run"]);
    ok(d, &args);
    let run = d.join("run");
    assert!(run.join("config.toml").exists());
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    // initial state, two BC epochs, one PPO epoch
    assert_eq!(lines.count(), 4);
    let checkpoints = std::fs::read_dir(run.join("checkpoints")).unwrap().count();
    assert_eq!(checkpoints, 4);
    let (model, manifest) = load_checkpoint(&run.join("final.ckpt")).unwrap();
    assert_eq!(manifest.epoch, 3);
    assert_eq!(model.config.hidden, 4);

    // the checkpoint carries its architecture, so eval needs no model flags
    let report = ok(d, &["eval", "--checkpoint", "run/final.ckpt", "--episodes", "eps", "--out", "report.json"]);
    assert!(report.starts_with("episodes 3 "), "{report}");
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(doc["records"].as_array().unwrap().len(), 3);
    let again = ok(d, &["eval", "--checkpoint", "run/final.ckpt", "--episodes", "eps"]);
    assert_eq!(report, again, "evaluation is deterministic");

    let oracle = ok(d, &["eval", "--agent", "oracle", "--episodes", "eps"]);
    assert!(oracle.contains("success 1.0000"), "{oracle}");

    ok(d, &["export-params", "--checkpoint", "run/final.ckpt", "--out", "params.json"]);
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("params.json")).unwrap()).unwrap();
    let params = doc["params"].as_object().unwrap();
    assert_eq!(params.len(), model.store.len());
    let (name, tensor) = model.store.iter().next().unwrap();
    assert_eq!(params[name]["shape"], serde_json::json!([tensor.rows(), tensor.cols()]));
}

#[test]
fn attention_log_lands_in_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = TINY.to_vec();
    args.extend(["--set", "train.ppo_epochs=0", "--set", "train.bc_epochs=1", "train", "--out", "run"]);
    ok(d, &args);
    let mut args = TINY.to_vec();
    args.extend(["eval", "--checkpoint", "run/final.ckpt", "--log-attention", "--greedy", "--out", "r.json"]);
    ok(d, &args);
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    let first = &doc["records"][0];
    let logs = first["step_logs"].as_array().unwrap();
    assert_eq!(logs.len(), first["steps"].as_u64().unwrap() as usize);
}

#[test]
fn configuration_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = tsgm(d, &["--set", "train.lamda=2", "gen-world", "--out", "w.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));

    std::fs::write(d.join("c.toml"), "[train]\ngamma = 2.0\n").unwrap();
    let out = tsgm(d, &["--config", "c.toml", "gen-world", "--out", "w.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma"));

    let out = tsgm(d, &["eval", "--checkpoint", "missing.ckpt"]);
    assert!(!out.status.success());
}
