use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::scenegen::{
    generate_dataset, read_dataset, read_splits, split_dataset, write_dataset, write_splits, ClassPalette, SceneConfig,
    SceneSample, Splits,
};

/// In-memory train/val/test samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub palette: ClassPalette,
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

impl Dataset {
    /// Generates `count` scenes and splits them with the scene seed.
    pub fn generate(scene: &SceneConfig, count: usize, ratios: (f64, f64, f64)) -> Result<Self> {
        let palette = ClassPalette::standard(scene.num_classes, scene.num_stages)?;
        let samples = generate_dataset(scene, &palette, count)?;
        let (train, val, test) = split_dataset(samples, ratios, scene.seed)?;
        Ok(Self {
            palette,
            train,
            val,
            test,
        })
    }

    /// Every sample in all three splits, for fixtures that train and
    /// evaluate on the same scenes.
    pub fn fixture(palette: ClassPalette, samples: Vec<SceneSample>) -> Self {
        Self {
            palette,
            train: samples.clone(),
            val: samples.clone(),
            test: samples,
        }
    }

    /// `count` generated scenes shared by all splits.
    pub fn generate_fixture(scene: &SceneConfig, count: usize) -> Result<Self> {
        let palette = ClassPalette::standard(scene.num_classes, scene.num_stages)?;
        let samples = generate_dataset(scene, &palette, count)?;
        Ok(Self::fixture(palette, samples))
    }

    /// Reads a dataset directory with its `splits.json`.
    pub fn load(root: &Path) -> Result<Self> {
        let splits = read_splits(root)?;
        let (palette, train) = read_dataset(root, Some(&splits.train))?;
        let (_, val) = read_dataset(root, Some(&splits.val))?;
        let (_, test) = read_dataset(root, Some(&splits.test))?;
        Ok(Self {
            palette,
            train,
            val,
            test,
        })
    }

    /// Writes every sample and `splits.json` under `root`.
    pub fn write(&self, root: &Path) -> Result<()> {
        let all: Vec<SceneSample> = self.train.iter().chain(&self.val).chain(&self.test).cloned().collect();
        write_dataset(&all, &self.palette, root)?;
        let ids = |v: &[SceneSample]| v.iter().map(|s| s.sample_id.clone()).collect();
        write_splits(
            root,
            &Splits {
                train: ids(&self.train),
                val: ids(&self.val),
                test: ids(&self.test),
            },
        )
    }

    /// Errors when the class count or any scene size disagrees with `config`.
    pub fn check(&self, config: &RunConfig) -> Result<()> {
        if self.palette.num_classes() != config.detector.num_classes {
            return Err(Error::Validation(format!(
                "dataset has {} classes, config expects {}",
                self.palette.num_classes(),
                config.detector.num_classes
            )));
        }
        let (h, w) = (config.detector.height, config.detector.width);
        for s in self.train.iter().chain(&self.val).chain(&self.test) {
            if (s.height, s.width) != (h, w) {
                return Err(Error::Ingestion {
                    sample: s.sample_id.clone(),
                    message: format!("scene is {}x{}, config expects {h}x{w}", s.height, s.width),
                });
            }
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&[SceneSample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Validation(format!("unknown split `{other}`"))),
        }
    }
}
