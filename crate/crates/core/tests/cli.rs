use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn crystalmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crystalmt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    let v: Value = serde_json::from_slice(&out.stdout).expect("stdout is json");
    assert_eq!(v["status"], "ok");
    v
}

fn write_small_config(path: &Path) {
    std::fs::write(
        path,
        r#"{"graph": {"cutoff": 5.0, "max_neighbors": 6, "gauss_step": 0.5, "z_max": 20},
            "model": {"conv_variant": "simple", "n_conv": 1, "atom_len": 6, "hidden_len": 6,
                      "n_hidden_per_task": 1, "n_tasks": 1, "seed": 0},
            "train": {"max_epochs": 3},
            "tasks": ["y1", "y2"],
            "band_gap": "y3"}"#,
    )
    .unwrap();
}

#[test]
fn synth_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let spec = dir.path().join("synth.json");
    std::fs::write(&spec, r#"{"n": 30}"#).unwrap();
    let v = ok_json(&crystalmt(&["synth", "--spec", p(&spec), "--out", p(&data), "--seed", "2"]));
    assert_eq!(v["result"]["entries"], 30);

    let config = dir.path().join("config.json");
    write_small_config(&config);
    let v = ok_json(&crystalmt(&["graphify", "--data", p(&data), "--config", p(&config)]));
    assert_eq!(v["result"]["graphs_built"], 30);
    let v = ok_json(&crystalmt(&["graphify", "--data", p(&data), "--config", p(&config)]));
    assert_eq!(v["result"]["cache_hits"], 30);

    let run = dir.path().join("run");
    ok_json(&crystalmt(&["train", "--data", p(&data), "--config", p(&config), "--seed", "4", "--out", p(&run)]));
    for f in ["checkpoint.json", "history.csv", "manifest.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);
    assert!(history.starts_with("epoch,train_loss,train_avg_mae,val_mae_y1,val_mae_y2,val_avg_mae"));

    let ck = run.join("checkpoint.json");
    let v = ok_json(&crystalmt(&["eval", "--checkpoint", p(&ck), "--data", p(&data), "--split", "val"]));
    assert_eq!(v["result"]["mae"].as_array().unwrap().len(), 2);
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["split"], "val");
    assert_eq!(metrics["count"], 6);

    let other = dir.path().join("all");
    ok_json(&crystalmt(&[
        "eval", "--checkpoint", p(&ck), "--data", p(&data), "--split", "all", "--out", p(&other),
    ]));
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(other.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["count"], 30);
}

#[test]
fn experiment_and_gridsearch_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let spec = dir.path().join("synth.json");
    std::fs::write(&spec, r#"{"n": 25}"#).unwrap();
    ok_json(&crystalmt(&["synth", "--spec", p(&spec), "--out", p(&data)]));

    let exp = dir.path().join("exp.json");
    std::fs::write(
        &exp,
        r#"{"graph": {"cutoff": 5.0, "max_neighbors": 6, "gauss_step": 0.5, "z_max": 20},
            "experiment": {"tasks": ["y1", "y2"], "n_seeds": 2,
              "model": {"conv_variant": "gated", "n_conv": 1, "atom_len": 4, "hidden_len": 4,
                        "n_hidden_per_task": 1, "n_tasks": 2, "seed": 0},
              "train": {"max_epochs": 2}}}"#,
    )
    .unwrap();
    let out = dir.path().join("exp");
    ok_json(&crystalmt(&["--jobs", "1", "experiment", "--data", p(&data), "--spec", p(&exp), "--out", p(&out)]));
    let agg = std::fs::read_to_string(out.join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 4, "header plus joint and two single-task rows:\n{agg}");
    assert!(out.join("improvement.csv").is_file());

    let config = dir.path().join("config.json");
    write_small_config(&config);
    let grid = dir.path().join("grid.json");
    std::fs::write(&grid, r#"{"n_conv": [1], "atom_len": [4], "hidden_len": [4], "n_hidden": [1], "l2": [0.0], "lr": [0.01], "weight_levels": [1, 2]}"#).unwrap();
    let out = dir.path().join("grid");
    let v = ok_json(&crystalmt(&[
        "gridsearch", "--data", p(&data), "--config", p(&config), "--grid", p(&grid), "--budget", "2", "--out", p(&out),
    ]));
    assert_eq!(v["status"], "ok");
    let trials = std::fs::read_to_string(out.join("trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 3);
    assert!(out.join("best_config.json").is_file());
}

#[test]
fn usage_errors_exit_two() {
    let out = crystalmt(&["train", "--data"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).expect("stderr is json");
    assert_eq!(err["status"], "error");

    assert_eq!(crystalmt(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(crystalmt(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_data_exits_one_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = crystalmt(&["train", "--data", p(&missing), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nope"), "{stderr}");
}
