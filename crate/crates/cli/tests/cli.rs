use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use phenocd::config::RunConfig;
use phenocd::scenegen::{read_gray_png, write_rgb_png, SAMPLES_DIR};

fn phenocd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phenocd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("{e}: {text}"))
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::small();
    cfg.scene.seed = 5;
    cfg.dataset.count = 8;
    cfg.dataset.ratios = (0.5, 0.25, 0.25);
    cfg.detector.channels = 8;
    cfg.detector.head_hidden = 8;
    cfg.constrainer.cluster.centroids_per_class = 2;
    cfg.schedule.stage1_epochs = 2;
    cfg.schedule.stage3_epochs = 1;
    let path = dir.join("tiny.json");
    cfg.save(&path).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_parse_errors() {
    assert_eq!(code(&phenocd(&["--help"])), 0);
    assert_eq!(code(&phenocd(&["--version"])), 0);
    assert_eq!(code(&phenocd(&["frobnicate"])), 1);
    assert_eq!(code(&phenocd(&["train", "--stage", "4", "--data", "d", "--out", "r"])), 1);
}

#[test]
fn gen_data_rejects_two_samples_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let res = phenocd(&["gen-data", "--out", s(&out), "--count", "2"]);
    assert_eq!(code(&res), 1);
    assert!(String::from_utf8_lossy(&res.stderr).contains("dataset.count"));
    assert!(!out.exists());
}

#[test]
fn malformed_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"detector": {"channels": 3}}"#).unwrap();
    let res = phenocd(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&res), 1);
    std::fs::write(&cfg, r#"{"no_such_field": 1}"#).unwrap();
    assert_eq!(code(&phenocd(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))])), 1);
}

#[test]
fn stage_two_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    assert_eq!(code(&phenocd(&["gen-data", "--config", s(&cfg), "--out", s(&data)])), 0);
    let res = phenocd(&["train", "--config", s(&cfg), "--data", s(&data), "--stage", "2", "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&res), 1);
    assert!(String::from_utf8_lossy(&res.stderr).contains("stage-1 checkpoint"));
    let res = phenocd(&["train", "--config", s(&cfg), "--data", s(&data), "--stage", "3", "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&res), 1);
}

#[test]
fn staged_training_eval_and_empty_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert_eq!(code(&phenocd(&["gen-data", "--config", s(&cfg), "--out", s(&data)])), 0);
    for stage in ["1", "2", "3"] {
        let res = phenocd(&["train", "--config", s(&cfg), "--data", s(&data), "--stage", stage, "--out", s(&run)]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        assert!(stdout_json(&res).get(format!("stage{stage}")).is_some());
    }
    assert!(run.join("centroids.json").exists());

    let res = phenocd(&["eval", "--run", s(&run), "--data", s(&data), "--split", "val"]);
    assert_eq!(code(&res), 0);
    let report = stdout_json(&res);
    assert_eq!(report["split"], "val");
    assert!(run.join("metrics-val.json").exists());

    let splits = data.join("splits.json");
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&splits).unwrap()).unwrap();
    v["test"] = serde_json::json!([]);
    std::fs::write(&splits, v.to_string()).unwrap();
    let res = phenocd(&["eval", "--run", s(&run), "--data", s(&data), "--split", "test"]);
    assert_eq!(code(&res), 1);
    assert!(String::from_utf8_lossy(&res.stderr).contains("empty"));
    assert_eq!(code(&phenocd(&["eval", "--run", s(&dir.path().join("nope")), "--data", s(&data)])), 1);
}

#[test]
fn same_seed_gives_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    assert_eq!(code(&phenocd(&["gen-data", "--config", s(&cfg), "--out", s(&data)])), 0);
    let mut logs = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        assert_eq!(code(&phenocd(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)])), 0);
        assert_eq!(code(&phenocd(&["eval", "--run", s(&run), "--data", s(&data)])), 0);
        logs.push((std::fs::read(run.join("log.jsonl")).unwrap(), std::fs::read(run.join("metrics-test.json")).unwrap()));
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn ablate_single_variant_is_one_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let out = dir.path().join("abl");
    assert_eq!(code(&phenocd(&["gen-data", "--config", s(&cfg), "--out", s(&data)])), 0);
    let res = phenocd(&[
        "ablate", "--config", s(&cfg), "--data", s(&data), "--variants", "subtract:+scm", "--seeds", "3", "--out", s(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let table = stdout_json(&res);
    assert_eq!(table["rows"].as_array().unwrap().len(), 1);
    assert_eq!(table["rows"][0]["seeds"], serde_json::json!([3]));
    assert!(out.join("ablation.json").exists());
    let bad = phenocd(&["ablate", "--config", s(&cfg), "--data", s(&data), "--variants", "dam:+xyz", "--out", s(&out)]);
    assert_eq!(code(&bad), 1);
}

/// With subtract fusion an image paired with itself has a zero difference
/// map, so a fitted model reports (almost) no change.
#[test]
fn predict_identical_pair_with_subtract_fusion() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::overfit();
    cfg.detector.fusion = phenocd::detector::FusionMode::Subtract;
    cfg.schedule.stage1_epochs = 60;
    cfg.schedule.stage3_epochs = 5;
    let cfg_path = dir.path().join("fixture.json");
    cfg.save(&cfg_path).unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    assert_eq!(code(&phenocd(&["gen-data", "--config", s(&cfg_path), "--out", s(&data)])), 0);
    let res = phenocd(&["train", "--config", s(&cfg_path), "--data", s(&data), "--out", s(&run)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));

    let sample = std::fs::read_dir(data.join(SAMPLES_DIR)).unwrap().next().unwrap().unwrap().path();
    let t1 = sample.join("t1.png");
    let pred = dir.path().join("pred");
    let res = phenocd(&["predict", "--run", s(&run), "--t1", s(&t1), "--t2", s(&t1), "--out", s(&pred)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let frac = stdout_json(&res)["changed_fraction"].as_f64().unwrap();
    assert!(frac < 0.05, "changed fraction {frac}");
    let (map, h, w) = read_gray_png(&pred.join("change.png")).unwrap();
    assert_eq!((h, w), (32, 32));
    assert!(map.iter().all(|&v| v == 0 || v == 255));
    let white = map.iter().filter(|&&v| v == 255).count() as f64 / map.len() as f64;
    assert!((white - frac).abs() < 1e-12);
    assert!(pred.join("probability.png").exists());

    let small = dir.path().join("small.png");
    write_rgb_png(&small, &vec![0.5; 16 * 16 * 3], 16, 16).unwrap();
    let res = phenocd(&["predict", "--run", s(&run), "--t1", s(&small), "--t2", s(&small), "--out", s(&pred)]);
    assert_eq!(code(&res), 1);
}

#[test]
fn selftest_passes() {
    let res = phenocd(&["selftest"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stdout));
    let lines: Vec<serde_json::Value> = String::from_utf8_lossy(&res.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines.len() > 10);
    assert!(lines.iter().all(|l| l["status"] == "pass"));
}
