//! Run configuration: one JSON document with defaults for every field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constrainer::{ConstrainerConfig, LossWeights};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::orchestrator::StageSchedule;
use crate::scenegen::SceneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub count: usize,
    /// `(train, val, test)`.
    pub ratios: (f64, f64, f64),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 200,
            ratios: (0.8, 0.1, 0.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub dataset: DatasetConfig,
    pub detector: DetectorConfig,
    pub constrainer: ConstrainerConfig,
    pub weights: LossWeights,
    pub schedule: StageSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneConfig::default(),
            dataset: DatasetConfig::default(),
            detector: DetectorConfig::default(),
            constrainer: ConstrainerConfig::default(),
            weights: LossWeights::default(),
            schedule: StageSchedule::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::json("run config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.detector.validate()?;
        self.constrainer.validate()?;
        self.weights.validate()?;
        self.schedule.validate()?;
        if self.dataset.count < 3 {
            return Err(Error::config("dataset.count", "need at least 3 samples"));
        }
        let (a, b, c) = self.dataset.ratios;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::config("dataset.ratios", "must be positive and sum to 1"));
        }
        if (self.scene.height, self.scene.width) != (self.detector.height, self.detector.width) {
            return Err(Error::config("detector.height/width", "must match scene.height/width"));
        }
        if self.scene.num_classes != self.detector.num_classes {
            return Err(Error::config("detector.num_classes", "must match scene.num_classes"));
        }
        Ok(())
    }

    /// Desk-scale settings used by the fixtures: 32×32 scenes and a narrow
    /// network.
    pub fn small() -> Self {
        let mut cfg = RunConfig::default();
        cfg.scene.height = 32;
        cfg.scene.width = 32;
        cfg.scene.blob_count = (2, 4);
        cfg.detector.height = 32;
        cfg.detector.width = 32;
        cfg.detector.channels = 16;
        cfg.detector.head_hidden = 16;
        cfg.detector.spb_scales = vec![1, 2, 4];
        cfg.constrainer.proj_hidden = 32;
        cfg.constrainer.embed_dim = 16;
        cfg.constrainer.sem_hidden = 16;
        cfg.constrainer.min_region_pixels = 4;
        cfg.constrainer.sampling.anchors_per_class = 8;
        cfg.constrainer.sampling.negatives = 32;
        cfg.schedule.optimizer.lr = 0.05;
        cfg
    }

    /// The 200-scene phenology benchmark used for the ablation checks.
    pub fn benchmark() -> Self {
        let mut cfg = Self::small();
        cfg.scene.pseudo_change_fraction = 0.3;
        cfg.dataset.count = 200;
        cfg.schedule.stage1_epochs = 40;
        cfg.schedule.stage3_epochs = 40;
        cfg
    }

    /// Settings for the eight-pair memorization fixture. Change regions
    /// cover 30% of each scene because a stride-4 change map cannot trace
    /// the boundaries of the smaller default blobs at 32×32.
    pub fn overfit() -> Self {
        let mut cfg = Self::small();
        cfg.scene.seed = 3;
        cfg.scene.change_fraction = 0.3;
        cfg.dataset.count = 8;
        cfg.detector.channels = 32;
        cfg.detector.head_hidden = 32;
        cfg.schedule.stage1_epochs = 500;
        cfg.schedule.stage3_epochs = 50;
        cfg.schedule.validation_period = 10;
        cfg.schedule.selection_split = "train".into();
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"detector": {"chanels": 8}}"#).is_err());
    }

    #[test]
    fn mismatched_sizes_name_the_field() {
        let err = RunConfig::from_json(r#"{"detector": {"height": 32, "width": 32}}"#).unwrap_err();
        assert!(err.to_string().contains("detector.height"));
    }

    #[test]
    fn small_is_valid() {
        RunConfig::small().validate().unwrap();
        RunConfig::overfit().validate().unwrap();
        RunConfig::benchmark().validate().unwrap();
    }
}
