//! Three-stage training: detector with change/semantic/contrastive
//! constraints, centroid harvesting, then training with the phenology term.

pub mod ablate;
pub mod data;
pub mod train;

pub use ablate::{ablate, AblationRow, AblationTable, Chain, Variant};
pub use data::Dataset;
pub use train::{build_objective, confusion, train_epoch, train_step, ActiveLosses, LossComponents, Objective};

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::constrainer::{
    cluster_phenology, embedding_rows, BatchLabels, Network, PhenoCentroidBank, Reservoir,
};
use crate::diffcore::{checkpoint, Graph, Mode, Sgd, SgdConfig};
use crate::error::{Error, Result};
use crate::metrics::{adjusted_rand_index, MetricsReport};
use crate::scenegen::{sample_seed, SceneSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSchedule {
    pub stage1_epochs: usize,
    pub stage3_epochs: usize,
    pub batch_size: usize,
    pub validation_period: usize,
    pub optimizer: SgdConfig,
    pub bn_momentum: f64,
    /// Start stage 3 from the stage-1 best checkpoint instead of a fresh
    /// initialization.
    pub resume_stage3: bool,
    /// Split used for best-checkpoint selection.
    pub selection_split: String,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            stage1_epochs: 60,
            stage3_epochs: 60,
            batch_size: 4,
            validation_period: 5,
            optimizer: SgdConfig::default(),
            bn_momentum: 0.1,
            resume_stage3: true,
            selection_split: "val".into(),
        }
    }
}

impl StageSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_epochs == 0 {
            return Err(Error::config("schedule.stage1_epochs", "must be at least 1"));
        }
        if self.stage3_epochs == 0 {
            return Err(Error::config("schedule.stage3_epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("schedule.batch_size", "must be at least 1"));
        }
        if self.validation_period == 0 {
            return Err(Error::config("schedule.validation_period", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("schedule.bn_momentum", "must lie in [0, 1]"));
        }
        if !matches!(self.selection_split.as_str(), "train" | "val" | "test") {
            return Err(Error::config("schedule.selection_split", "must be train, val or test"));
        }
        self.optimizer.validate()
    }
}

/// Progress of one stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainState {
    pub stage: u8,
    pub epoch: usize,
    pub best_iou: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
    pub seed: u64,
    pub curves: BTreeMap<String, Vec<f64>>,
}

impl TrainState {
    pub fn new(stage: u8, seed: u64) -> Self {
        Self {
            stage,
            epoch: 0,
            best_iou: None,
            best_epoch: None,
            best_checkpoint: None,
            seed,
            curves: BTreeMap::new(),
        }
    }

    /// Records a validation IoU; true when it improves on the best so far
    /// (the first value always does).
    pub fn record_validation(&mut self, iou: f64) -> bool {
        if self.best_iou.is_none_or(|b| iou > b) {
            self.best_iou = Some(iou);
            self.best_epoch = Some(self.epoch);
            true
        } else {
            false
        }
    }

    fn record_losses(&mut self, c: &LossComponents) {
        let mut push = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                self.curves.entry(k.to_string()).or_default().push(v);
            }
        };
        push("cd", c.cd);
        push("sem", c.sem);
        push("clem", c.clem);
        push("plm", c.plm);
        push("total", Some(c.total));
    }
}

/// File layout of one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn stage1_best(&self) -> PathBuf {
        self.root.join("stage1").join("ckpt-best")
    }

    pub fn stage3_best(&self) -> PathBuf {
        self.root.join("stage3").join("ckpt-best")
    }

    pub fn centroids(&self) -> PathBuf {
        self.root.join("centroids.json")
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("log.jsonl")
    }

    pub fn metrics(&self, split: &str) -> PathBuf {
        self.root.join(format!("metrics-{split}.json"))
    }

    pub fn create(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))
    }

    /// Best checkpoint of the latest finished training stage.
    pub fn final_checkpoint(&self) -> Result<(PathBuf, &'static str)> {
        if self.stage3_best().join(checkpoint::MANIFEST_FILE).exists() {
            Ok((self.stage3_best(), "stage3/ckpt-best"))
        } else if self.stage1_best().join(checkpoint::MANIFEST_FILE).exists() {
            Ok((self.stage1_best(), "stage1/ckpt-best"))
        } else {
            Err(Error::Precondition(format!("no checkpoint in {}", self.root.display())))
        }
    }

    fn append_log(&self, record: &serde_json::Value) -> Result<()> {
        let path = self.log();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{record}").map_err(|e| Error::io(&path, e))
    }

    fn reset_log(&self) -> Result<()> {
        let path = self.log();
        File::create(&path).map(drop).map_err(|e| Error::io(&path, e))
    }
}

/// Parameters of a fresh network for `config`.
pub fn init_network(config: &RunConfig) -> Result<Network<f32>> {
    Network::new(&config.detector, &config.constrainer, config.seed)
}

/// Network for `config` with weights from a checkpoint directory.
pub fn load_network(config: &RunConfig, dir: &Path) -> Result<Network<f32>> {
    let mut net = init_network(config)?;
    checkpoint::load_into(dir, &mut net.store)?;
    Ok(net)
}

fn model_json(config: &RunConfig) -> serde_json::Value {
    serde_json::json!({
        "detector": config.detector,
        "constrainer": config.constrainer,
    })
}

fn stage_rng(seed: u64, stage: u8) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sample_seed(seed, 0x5EED_0000 + u64::from(stage)))
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub state: TrainState,
    pub network: Network<f32>,
}

fn selection_split<'a>(config: &RunConfig, data: &'a Dataset) -> Result<&'a [SceneSample]> {
    let split = data.split(&config.schedule.selection_split)?;
    if split.is_empty() {
        return Err(Error::Validation(format!(
            "selection split `{}` is empty",
            config.schedule.selection_split
        )));
    }
    Ok(split)
}

#[allow(clippy::too_many_arguments)]
fn train_loop(
    run: &RunDir,
    config: &RunConfig,
    data: &Dataset,
    mut net: Network<f32>,
    mut state: TrainState,
    epochs: usize,
    active: ActiveLosses,
    bank: Option<&PhenoCentroidBank>,
    ckpt_dir: &Path,
) -> Result<StageOutcome> {
    let sched = &config.schedule;
    let mut sgd = Sgd::new(sched.optimizer)?;
    let mut rng = stage_rng(config.seed, state.stage);
    let val = selection_split(config, data)?;
    let threshold = config.detector.threshold;
    let mut best_net = None;
    for epoch in 1..=epochs {
        state.epoch = epoch;
        let losses = train_epoch(
            &mut net,
            &mut sgd,
            &data.train,
            sched.batch_size,
            &config.weights,
            active,
            bank,
            sched.bn_momentum,
            &mut rng,
        )
        .map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("stage {} epoch {epoch}: {m}", state.stage)),
            other => other,
        })?;
        state.record_losses(&losses);
        let mut record = serde_json::json!({
            "stage": state.stage,
            "epoch": epoch,
            "losses": losses,
        });
        if epoch % sched.validation_period == 0 || epoch == epochs {
            let iou = confusion(&net, val, threshold)?.report().iou;
            record["val_iou"] = serde_json::json!(iou);
            if state.record_validation(iou) {
                checkpoint::save(ckpt_dir, &net.store, state.stage, config.seed, epoch, model_json(config))?;
                state.best_checkpoint = Some(ckpt_dir.to_path_buf());
                record["best"] = serde_json::json!(true);
                best_net = Some(net.clone());
            }
            log::info!("stage {} epoch {epoch}: loss {:.4} val IoU {iou:.4}", state.stage, losses.total);
        }
        run.append_log(&record)?;
    }
    Ok(StageOutcome {
        state,
        network: best_net.unwrap_or(net),
    })
}

/// Stage 1: change, semantic and contrastive constraints from a fresh
/// initialization. Starts a new `log.jsonl`.
pub fn run_stage1(run: &RunDir, config: &RunConfig, data: &Dataset) -> Result<StageOutcome> {
    config.validate()?;
    data.check(config)?;
    let active = ActiveLosses::for_stage(&config.weights, false);
    if !(active.cd || active.sem || active.clem) {
        return Err(Error::config("weights", "stage 1 needs one of w_cd, w_sem, w_clem above zero"));
    }
    run.create()?;
    config.save(&run.config())?;
    run.reset_log()?;
    let net = init_network(config)?;
    train_loop(
        run,
        config,
        data,
        net,
        TrainState::new(1, config.seed),
        config.schedule.stage1_epochs,
        active,
        None,
        &run.stage1_best(),
    )
}

#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub bank: PhenoCentroidBank,
    /// Adjusted Rand index of centroid assignments against the planted stage
    /// labels, per class.
    pub ari: BTreeMap<usize, f64>,
    pub mean_ari: f64,
    pub samples_per_class: BTreeMap<usize, usize>,
}

/// Per-class embeddings (with planted stage labels) of a frozen network,
/// capped per class by reservoir sampling.
pub fn harvest_embeddings(
    net: &Network<f32>,
    samples: &[SceneSample],
    cap: usize,
    seed: u64,
) -> Result<BTreeMap<usize, Reservoir<(Vec<f64>, usize)>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: BTreeMap<usize, Reservoir<(Vec<f64>, usize)>> = BTreeMap::new();
    let dim = net.constrainer_config.embed_dim;
    for s in samples {
        let labels = BatchLabels::from_samples(&[s])?;
        let (x1, x2) = train::batch_inputs::<f32>(&[s])?;
        let mut g = Graph::new();
        let a = g.constant(x1);
        let b = g.constant(x2);
        let out = net.forward(&mut g, a, b, Mode::Eval)?;
        let rows = embedding_rows(g.value(out.emb_seg))?;
        for (i, (&class, &stage)) in labels.sem_low.iter().zip(&labels.stage_low).enumerate() {
            pools
                .entry(class)
                .or_insert_with(|| Reservoir::new(cap))
                .push((rows[i * dim..(i + 1) * dim].to_vec(), stage), &mut rng);
        }
    }
    Ok(pools)
}

/// Stage 2: harvest embeddings of the training split with the stage-1 best
/// weights and cluster each class; writes `centroids.json`.
pub fn run_stage2(run: &RunDir, config: &RunConfig, data: &Dataset) -> Result<Stage2Outcome> {
    config.validate()?;
    data.check(config)?;
    let ckpt = run.stage1_best();
    if !ckpt.join(checkpoint::MANIFEST_FILE).exists() {
        return Err(Error::Precondition("stage 2 needs a stage-1 checkpoint".into()));
    }
    if data.train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let net = load_network(config, &ckpt)?;
    let cl = &config.constrainer.cluster;
    let seed = sample_seed(config.seed, 0xC1_0000);
    let pools = harvest_embeddings(&net, &data.train, cl.max_samples_per_class, seed)?;
    let mut points = BTreeMap::new();
    let mut stages = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for (class, pool) in pools {
        counts.insert(class, pool.items().len());
        let (p, s): (Vec<Vec<f64>>, Vec<usize>) = pool.into_items().into_iter().unzip();
        points.insert(class, p);
        stages.insert(class, s);
    }
    let bank = cluster_phenology(&points, cl.centroids_per_class, cl.restarts, seed)?;
    let mut ari = BTreeMap::new();
    for cc in &bank.classes {
        let pts = &points[&cc.class];
        let assign = bank.assign(&pts.concat(), bank.dim, &vec![cc.class; pts.len()]);
        ari.insert(cc.class, adjusted_rand_index(&assign, &stages[&cc.class]));
    }
    let mean_ari = if ari.is_empty() {
        0.0
    } else {
        ari.values().sum::<f64>() / ari.len() as f64
    };
    run.create()?;
    bank.save(&run.centroids())?;
    let classes: Vec<serde_json::Value> = bank
        .classes
        .iter()
        .map(|c| {
            serde_json::json!({
                "class": c.class,
                "k": c.k,
                "samples": counts[&c.class],
                "iterations": c.iterations,
                "inertia": c.inertia,
                "ari": ari[&c.class],
            })
        })
        .collect();
    run.append_log(&serde_json::json!({"stage": 2, "classes": classes, "mean_ari": mean_ari}))?;
    Ok(Stage2Outcome {
        bank,
        ari,
        mean_ari,
        samples_per_class: counts,
    })
}

/// Stage 3: adds the phenology term. The selection split is scored before
/// the first step so the stage can never end below its starting point.
pub fn run_stage3(run: &RunDir, config: &RunConfig, data: &Dataset, bank: &PhenoCentroidBank) -> Result<StageOutcome> {
    config.validate()?;
    data.check(config)?;
    let ckpt = run.stage1_best();
    let net = if config.schedule.resume_stage3 {
        if !ckpt.join(checkpoint::MANIFEST_FILE).exists() {
            return Err(Error::Precondition("stage 3 resumes from a stage-1 checkpoint".into()));
        }
        load_network(config, &ckpt)?
    } else {
        init_network(config)?
    };
    let active = ActiveLosses::for_stage(&config.weights, true);
    let bank = active.plm.then_some(bank);
    let mut state = TrainState::new(3, config.seed);
    let val = selection_split(config, data)?;
    let iou = confusion(&net, val, config.detector.threshold)?.report().iou;
    state.record_validation(iou);
    checkpoint::save(&run.stage3_best(), &net.store, 3, config.seed, 0, model_json(config))?;
    state.best_checkpoint = Some(run.stage3_best());
    run.append_log(&serde_json::json!({"stage": 3, "epoch": 0, "val_iou": iou, "best": true}))?;
    train_loop(
        run,
        config,
        data,
        net,
        state,
        config.schedule.stage3_epochs,
        active,
        bank,
        &run.stage3_best(),
    )
}

/// Outcome of stages 1 → 2 → 3.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub stage1: TrainState,
    pub stage2: Stage2Outcome,
    pub stage3: TrainState,
}

pub fn run_all(run: &RunDir, config: &RunConfig, data: &Dataset) -> Result<RunOutcome> {
    let s1 = run_stage1(run, config, data)?;
    let s2 = run_stage2(run, config, data)?;
    let s3 = run_stage3(run, config, data, &s2.bank)?;
    Ok(RunOutcome {
        stage1: s1.state,
        stage2: s2,
        stage3: s3.state,
    })
}

/// Metrics of the run's latest best checkpoint on `split`; written to
/// `metrics-<split>.json`.
pub fn evaluate(run: &RunDir, config: &RunConfig, data: &Dataset, split: &str) -> Result<MetricsReport> {
    let samples = data.split(split)?;
    if samples.is_empty() {
        return Err(Error::Validation(format!("split `{split}` is empty")));
    }
    let (dir, id) = run.final_checkpoint()?;
    let net = load_network(config, &dir)?;
    let report = confusion(&net, samples, config.detector.threshold)?
        .report()
        .with_context(split, id);
    let path = run.metrics(split);
    fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
