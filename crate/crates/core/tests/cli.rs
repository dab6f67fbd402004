use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use equipose::cli::Prediction;
use equipose::eval::report::read_csv;
use equipose::eval::{read_dataset, summarize, Split, Summary};
use equipose::geometry::cloud::PointCloud;
use equipose::geometry::io::write_ply;
use equipose::heads::SelectionRecord;
use sha2::{Digest, Sha256};

fn equipose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_equipose")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree_hash(dir: &Path) -> String {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    format!("{:x}", h.finalize())
}

fn small_spec(dir: &Path) -> String {
    let spec = dir.join("spec.json");
    let text = r#"{"train_per_category": 2, "test_per_category": 1, "points": 32, "observed_points": 32, "dense_points": 128}"#;
    fs::write(&spec, text).unwrap();
    path(&spec).to_string()
}

#[test]
fn usage_errors_exit_with_two() {
    let out = equipose(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(equipose(&["eval"]).status.code(), Some(2));
    assert_eq!(equipose(&["--help"]).status.code(), Some(0));
}

#[test]
fn generation_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for d in [&a, &b] {
        assert_eq!(equipose(&["gen", "--seed", "7", "--out", path(d)]).status.code(), Some(0));
    }
    assert_eq!(tree_hash(&a), tree_hash(&b));
    assert_eq!(equipose(&["gen", "--seed", "8", "--out", path(&c)]).status.code(), Some(0));
    assert_ne!(tree_hash(&a), tree_hash(&c));
}

#[test]
fn perfect_predictions_score_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    let spec = small_spec(tmp.path());
    assert_eq!(equipose(&["gen", "--spec", &spec, "--out", path(&data_dir)]).status.code(), Some(0));
    let data = read_dataset(&data_dir).unwrap();
    let pred_dir = tmp.path().join("pred");
    fs::create_dir_all(pred_dir.join("shapes")).unwrap();
    let mut preds = Vec::new();
    for inst in data.split(Split::Test) {
        write_ply(&pred_dir.join("shapes").join(format!("{}.ply", inst.id)), &PointCloud::new(inst.canonical.clone()).unwrap()).unwrap();
        let selection = SelectionRecord { quaternion: inst.pose.rotation, translation_m: inst.pose.translation, scale: inst.scale, chamfer: 0.0, hypothesis_indices: [0, 0] };
        preds.push(Prediction { id: inst.id.clone(), category: inst.category.name().into(), selection });
    }
    fs::write(pred_dir.join("predictions.json"), serde_json::to_string(&preds).unwrap()).unwrap();
    let out_dir = tmp.path().join("eval");
    let out = equipose(&["eval", "--data", path(&data_dir), "--predictions", path(&pred_dir), "--out", path(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Summary = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.count, 3);
    for v in [summary.iou50, summary.iou75, summary.deg5_cm2, summary.deg5_cm5, summary.deg10_cm2, summary.deg10_cm5] {
        assert_eq!(v, 1.0);
    }
    assert_eq!(summary.mean_cd, 0.0);
    // the summary is reproducible from the CSV alone
    assert_eq!(summarize(&read_csv(&out_dir.join("records.csv")).unwrap()).unwrap(), summary);
}

#[test]
fn train_infer_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    let spec = small_spec(tmp.path());
    assert_eq!(equipose(&["gen", "--spec", &spec, "--out", path(&data_dir)]).status.code(), Some(0));
    let config = tmp.path().join("config.json");
    let text = r#"{"model": {"width": 8, "heads": 2, "group_width": 4, "pose_hidden": 8, "kernel_size": 6, "k_seed": 2, "max_neighbors": 8, "time_width": 8}, "train": {"batch": 2, "log_every": 1}}"#;
    fs::write(&config, text).unwrap();
    let (pre, refined) = (tmp.path().join("pre"), tmp.path().join("refined"));
    let run = |args: &[&str]| {
        let out = equipose(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["pretrain", "--data", path(&data_dir), "--config", path(&config), "--steps", "2", "--seed", "3", "--deterministic", "--out", path(&pre)]);
    let log = fs::read_to_string(pre.join("train_log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let entry: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "loss", "lr", "wall_ms"] {
        assert!(entry.get(key).is_some(), "{key}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(pre.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["phase"], "pretrain");
    assert_eq!(manifest["step"], 2);
    run(&["refine", "--data", path(&data_dir), "--from", path(&pre), "--steps", "1", "--out", path(&refined)]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(refined.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["phase"], "refine");
    assert!(manifest["frozen"].as_array().unwrap().iter().any(|n| n.as_str().unwrap().starts_with("denoiser.")));
    let (inf_a, inf_b) = (tmp.path().join("inf_a"), tmp.path().join("inf_b"));
    for d in [&inf_a, &inf_b] {
        run(&["infer", "--data", path(&data_dir), "--model", path(&refined), "--deterministic", "--out", path(d)]);
    }
    assert_eq!(tree_hash(&inf_a), tree_hash(&inf_b));
    let preds: Vec<Prediction> = serde_json::from_str(&fs::read_to_string(inf_a.join("predictions.json")).unwrap()).unwrap();
    assert_eq!(preds.len(), 3);
    let eval_dir = tmp.path().join("eval");
    run(&["eval", "--data", path(&data_dir), "--model", path(&refined), "--no-symmetry", "--out", path(&eval_dir)]);
    assert_eq!(read_csv(&eval_dir.join("records.csv")).unwrap().len(), 3);
    // scoring the saved predictions gives the same table
    let saved_dir = tmp.path().join("saved");
    run(&["eval", "--data", path(&data_dir), "--predictions", path(&inf_a), "--no-symmetry", "--out", path(&saved_dir)]);
    assert_eq!(read_csv(&eval_dir.join("records.csv")).unwrap(), read_csv(&saved_dir.join("records.csv")).unwrap());
}

#[test]
fn missing_inputs_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    assert_eq!(equipose(&["refine", "--data", path(&missing), "--from", path(&missing)]).status.code(), Some(1));
}
