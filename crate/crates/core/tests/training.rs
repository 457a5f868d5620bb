use phenocd::config::RunConfig;
use phenocd::orchestrator::{self, Dataset, RunDir};
use phenocd::Error;

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::small();
    cfg.scene.seed = 21;
    cfg.dataset.count = 8;
    cfg.dataset.ratios = (0.5, 0.25, 0.25);
    cfg.detector.channels = 8;
    cfg.detector.head_hidden = 8;
    cfg.constrainer.cluster.centroids_per_class = 2;
    cfg.schedule.stage1_epochs = 2;
    cfg.schedule.stage3_epochs = 2;
    cfg.schedule.validation_period = 1;
    cfg
}

fn data(cfg: &RunConfig) -> Dataset {
    Dataset::generate(&cfg.scene, cfg.dataset.count, cfg.dataset.ratios).unwrap()
}

#[test]
fn three_stages_write_the_run_layout() {
    let cfg = tiny();
    let data = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    let out = orchestrator::run_all(&run, &cfg, &data).unwrap();
    assert!(out.stage1.best_iou.is_some());
    assert!(out.stage3.best_iou.unwrap() >= out.stage1.best_iou.unwrap() - 1e-12);
    assert!(!out.stage2.bank.classes.is_empty());
    for path in [run.config(), run.centroids(), run.log()] {
        assert!(path.exists(), "{}", path.display());
    }
    let log = std::fs::read_to_string(run.log()).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let stages: Vec<u64> = lines.iter().map(|l| l["stage"].as_u64().unwrap()).collect();
    assert_eq!(stages, vec![1, 1, 2, 3, 3, 3]);

    let report = orchestrator::evaluate(&run, &cfg, &data, "test").unwrap();
    assert_eq!(report.checkpoint, "stage3/ckpt-best");
    let on_disk: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.metrics("test")).unwrap()).unwrap();
    assert_eq!(on_disk["split"], "test");
    assert!((on_disk["iou"].as_f64().unwrap() - report.iou).abs() < 1e-6);
}

#[test]
fn stage_two_needs_stage_one() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let err = orchestrator::run_stage2(&RunDir::new(dir.path()), &cfg, &data(&cfg)).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)), "{err}");
}

#[test]
fn empty_split_cannot_be_evaluated() {
    let cfg = tiny();
    let mut data = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    orchestrator::run_stage1(&run, &cfg, &data).unwrap();
    data.test.clear();
    assert!(matches!(orchestrator::evaluate(&run, &cfg, &data, "test"), Err(Error::Validation(_))));
    assert!(orchestrator::evaluate(&run, &cfg, &data, "val").is_ok());
}

#[test]
fn checkpoint_reload_reproduces_predictions() {
    let cfg = tiny();
    let data = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::new(dir.path());
    let s1 = orchestrator::run_stage1(&run, &cfg, &data).unwrap();
    let loaded = orchestrator::load_network(&cfg, &run.stage1_best()).unwrap();
    for s in &data.test {
        let a = orchestrator::train::predict_sample(&s1.network, s).unwrap();
        let b = orchestrator::train::predict_sample(&loaded, s).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn invalid_schedule_is_rejected_before_training() {
    let mut cfg = tiny();
    cfg.schedule.stage1_epochs = 0;
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    let err = orchestrator::run_stage1(&RunDir::new(&root), &cfg, &data(&tiny())).unwrap_err();
    assert!(matches!(err, Error::Config { .. }), "{err}");
    assert!(!root.exists());
}

#[test]
fn fixture_loss_falls_over_the_first_ten_epochs() {
    let mut cfg = RunConfig::overfit();
    cfg.schedule.stage1_epochs = 10;
    let data = Dataset::generate_fixture(&cfg.scene, cfg.dataset.count).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = orchestrator::run_stage1(&RunDir::new(dir.path()), &cfg, &data).unwrap();
    let total = &out.state.curves["total"];
    assert_eq!(total.len(), 10);
    for w in total.windows(2) {
        assert!(w[1] < w[0], "{total:?}");
    }
}
