//! Synthetic bi-temporal scenes with planted class changes (true changes) and
//! stage changes within unchanged regions (phenological pseudo-changes).

mod io;
mod palette;
mod split;

pub use io::{
    quantize, read_dataset, read_gray_png, read_rgb_png, read_splits, write_dataset, write_gray_png, write_rgb_png,
    write_splits, DatasetManifest, SampleMeta, Splits, PALETTE_FILE, SAMPLES_DIR, SPLITS_FILE,
};
pub use palette::{rgb_distance, ClassEntry, ClassPalette};
pub use split::{split_dataset, split_sizes};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub num_stages: usize,
    /// Inclusive range of Voronoi regions per scene.
    pub blob_count: (usize, usize),
    pub change_fraction: f64,
    pub pseudo_change_fraction: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 4,
            num_stages: 4,
            blob_count: (6, 12),
            change_fraction: 0.1,
            pseudo_change_fraction: 0.3,
            noise_sigma: 0.03,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 {
            return Err(Error::config("height", "must be at least 16"));
        }
        if self.width < 16 {
            return Err(Error::config("width", "must be at least 16"));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::config("num_classes", "must be in 2..=255"));
        }
        if !(2..=255).contains(&self.num_stages) {
            return Err(Error::config("num_stages", "must be in 2..=255"));
        }
        if self.blob_count.0 == 0 || self.blob_count.1 < self.blob_count.0 {
            return Err(Error::config("blob_count", "need 1 <= min <= max"));
        }
        if !(0.0..=0.5).contains(&self.change_fraction) {
            return Err(Error::config("change_fraction", "must lie in [0, 0.5]"));
        }
        if !(0.0..=1.0).contains(&self.pseudo_change_fraction) {
            return Err(Error::config("pseudo_change_fraction", "must lie in [0, 1]"));
        }
        if !(0.0..=0.2).contains(&self.noise_sigma) {
            return Err(Error::config("noise_sigma", "must lie in [0, 0.2]"));
        }
        Ok(())
    }

    fn check_palette(&self, palette: &ClassPalette) -> Result<()> {
        palette.validate()?;
        if palette.num_classes() != self.num_classes {
            return Err(Error::config(
                "num_classes",
                format!("palette has {} classes", palette.num_classes()),
            ));
        }
        if palette.num_stages() != self.num_stages {
            return Err(Error::config("num_stages", format!("palette has {} stages", palette.num_stages())));
        }
        Ok(())
    }
}

/// One bi-temporal record. Images are `H×W×3` row-major in `[0,1]`; maps are
/// `H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub sample_id: String,
    pub height: usize,
    pub width: usize,
    pub image_t1: Vec<f32>,
    pub image_t2: Vec<f32>,
    pub sem_t1: Vec<u8>,
    pub sem_t2: Vec<u8>,
    pub change: Vec<u8>,
    pub stage_t1: Vec<u8>,
    pub stage_t2: Vec<u8>,
}

impl SceneSample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn change_fraction(&self) -> f64 {
        self.change.iter().filter(|&&c| c == 1).count() as f64 / self.pixels() as f64
    }

    /// Pixels with the same class but a different stage at t2.
    pub fn pseudo_change_mask(&self) -> Vec<bool> {
        (0..self.pixels())
            .map(|p| self.sem_t1[p] == self.sem_t2[p] && self.stage_t1[p] != self.stage_t2[p])
            .collect()
    }

    /// Recomputes the change map from the semantic maps.
    pub fn derived_change(&self) -> Vec<u8> {
        self.sem_t1.iter().zip(&self.sem_t2).map(|(a, b)| u8::from(a != b)).collect()
    }

    /// Images swapped between the two dates (labels follow).
    pub fn swapped(&self) -> SceneSample {
        SceneSample {
            sample_id: self.sample_id.clone(),
            height: self.height,
            width: self.width,
            image_t1: self.image_t2.clone(),
            image_t2: self.image_t1.clone(),
            sem_t1: self.sem_t2.clone(),
            sem_t2: self.sem_t1.clone(),
            change: self.change.clone(),
            stage_t1: self.stage_t2.clone(),
            stage_t2: self.stage_t1.clone(),
        }
    }
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates one scene from `config.seed`.
pub fn generate_scene(config: &SceneConfig, palette: &ClassPalette) -> Result<SceneSample> {
    config.validate()?;
    config.check_palette(palette)?;
    Ok(generate_unchecked(config, palette, format!("scene-{:016x}", config.seed)))
}

/// Generates `count` scenes; sample `i` uses [`sample_seed`]`(config.seed, i)`
/// and is named `s{i:05}`.
pub fn generate_dataset(config: &SceneConfig, palette: &ClassPalette, count: usize) -> Result<Vec<SceneSample>> {
    config.validate()?;
    config.check_palette(palette)?;
    Ok((0..count)
        .map(|i| {
            let cfg = SceneConfig {
                seed: sample_seed(config.seed, i as u64),
                ..config.clone()
            };
            generate_unchecked(&cfg, palette, format!("s{i:05}"))
        })
        .collect())
}

fn generate_unchecked(config: &SceneConfig, palette: &ClassPalette, sample_id: String) -> SceneSample {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (h, w) = (config.height, config.width);
    let n = h * w;
    let k = config.num_classes;
    let s = config.num_stages;

    // Voronoi partition into class regions.
    let cells = rng.random_range(config.blob_count.0..=config.blob_count.1);
    let centers: Vec<(f64, f64)> = (0..cells)
        .map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)))
        .collect();
    let mut cell_class: Vec<u8> = (0..cells).map(|_| rng.random_range(0..k) as u8).collect();
    if cells > 1 && cell_class.iter().all(|&c| c == cell_class[0]) {
        cell_class[1] = ((cell_class[0] as usize + 1 + rng.random_range(0..k - 1)) % k) as u8;
    }
    let cell_stage: Vec<u8> = (0..cells).map(|_| rng.random_range(0..s) as u8).collect();
    let mut cell_of = vec![0usize; n];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, &(cy, cx)) in centers.iter().enumerate() {
                let d = (py - cy).powi(2) + (px - cx).powi(2);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            cell_of[y * w + x] = best;
        }
    }
    let sem_t1: Vec<u8> = cell_of.iter().map(|&c| cell_class[c]).collect();
    let stage_t1: Vec<u8> = cell_of.iter().map(|&c| cell_stage[c]).collect();
    let mut sem_t2 = sem_t1.clone();
    let mut stage_t2 = stage_t1.clone();

    // True changes: disc-shaped blobs repainted with a new class and stage.
    let target = (config.change_fraction * n as f64).round() as usize;
    let mut changed = vec![false; n];
    let mut n_changed = 0usize;
    let min_blob = std::f64::consts::PI * 4.0;
    let max_r = (h.min(w) as f64) / 3.0;
    let mut attempts = 0;
    while target > 0 && n_changed < target && attempts < 500 {
        attempts += 1;
        let deficit = (target - n_changed) as f64;
        if deficit < min_blob * 0.5 && n_changed > 0 {
            break;
        }
        let r = ((deficit / std::f64::consts::PI).sqrt() * rng.random_range(0.6..1.0)).clamp(2.0, max_r);
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let new_class = rng.random_range(0..k) as u8;
        let new_stage = rng.random_range(0..s) as u8;
        let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h));
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w));
        for y in y0..y1 {
            for x in x0..x1 {
                let p = y * w + x;
                let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                if d2 > r * r || changed[p] || sem_t1[p] == new_class {
                    continue;
                }
                sem_t2[p] = new_class;
                stage_t2[p] = new_stage;
                changed[p] = true;
                n_changed += 1;
            }
        }
    }

    // Pseudo-changes: whole regions of unchanged pixels move to another stage.
    let unchanged = n - n_changed;
    let pseudo_target = (config.pseudo_change_fraction * unchanged as f64).round() as usize;
    let mut order: Vec<usize> = (0..cells).collect();
    order.shuffle(&mut rng);
    let mut flipped = 0usize;
    for cell in order {
        if flipped >= pseudo_target {
            break;
        }
        let shift = rng.random_range(1..s) as u8;
        let new_stage = ((cell_stage[cell] as usize + shift as usize) % s) as u8;
        for p in 0..n {
            if cell_of[p] == cell && !changed[p] {
                stage_t2[p] = new_stage;
                flipped += 1;
            }
        }
    }

    let change: Vec<u8> = sem_t1.iter().zip(&sem_t2).map(|(a, b)| u8::from(a != b)).collect();
    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).expect("sigma validated");
    let mut render = |sem: &[u8], stage: &[u8]| -> Vec<f32> {
        let mut img = Vec::with_capacity(n * 3);
        for p in 0..n {
            let sig = palette.signature(sem[p] as usize, stage[p] as usize);
            for v in sig {
                let e = if config.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                img.push((v + e).clamp(0.0, 1.0) as f32);
            }
        }
        img
    };
    let image_t1 = render(&sem_t1, &stage_t1);
    let image_t2 = render(&sem_t2, &stage_t2);

    SceneSample {
        sample_id,
        height: h,
        width: w,
        image_t1,
        image_t2,
        sem_t1,
        sem_t2,
        change,
        stage_t1,
        stage_t2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64) -> SceneConfig {
        SceneConfig {
            seed,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let p = ClassPalette::standard(4, 4).unwrap();
        assert_eq!(generate_scene(&cfg(3), &p).unwrap(), generate_scene(&cfg(3), &p).unwrap());
        assert_ne!(generate_scene(&cfg(3), &p).unwrap(), generate_scene(&cfg(4), &p).unwrap());
    }

    #[test]
    fn zero_change_fraction_gives_empty_change_map() {
        let p = ClassPalette::standard(4, 4).unwrap();
        for seed in 0..10 {
            let s = generate_scene(
                &SceneConfig {
                    change_fraction: 0.0,
                    ..cfg(seed)
                },
                &p,
            )
            .unwrap();
            assert!(s.change.iter().all(|&c| c == 0));
        }
    }

    #[test]
    fn change_map_matches_semantics_exhaustively() {
        let p = ClassPalette::standard(4, 4).unwrap();
        for seed in 0..20 {
            let s = generate_scene(&cfg(seed), &p).unwrap();
            assert_eq!(s.change, s.derived_change());
            assert_eq!(s.image_t1.len(), 64 * 64 * 3);
            assert!(s.image_t1.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn invalid_config_names_field() {
        let p = ClassPalette::standard(4, 4).unwrap();
        let err = generate_scene(
            &SceneConfig {
                change_fraction: 0.7,
                ..cfg(0)
            },
            &p,
        )
        .unwrap_err();
        assert!(err.to_string().contains("change_fraction"));
        let err = generate_scene(
            &SceneConfig {
                height: 8,
                ..cfg(0)
            },
            &p,
        )
        .unwrap_err();
        assert!(err.to_string().contains("height"));
        let err = generate_scene(
            &SceneConfig {
                noise_sigma: 0.3,
                ..cfg(0)
            },
            &p,
        )
        .unwrap_err();
        assert!(err.to_string().contains("noise_sigma"));
    }

    #[test]
    fn stage_maps_are_regionwise() {
        // pixels of one Voronoi region share a stage; with no noise, identical
        // (class, stage) pairs render identically
        let p = ClassPalette::standard(4, 4).unwrap();
        let s = generate_scene(
            &SceneConfig {
                noise_sigma: 0.0,
                ..cfg(5)
            },
            &p,
        )
        .unwrap();
        for q in 0..s.pixels() {
            let sig = p.signature(s.sem_t1[q] as usize, s.stage_t1[q] as usize);
            for c in 0..3 {
                assert!((s.image_t1[q * 3 + c] as f64 - sig[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn swapped_swaps_dates() {
        let p = ClassPalette::standard(4, 4).unwrap();
        let s = generate_scene(&cfg(1), &p).unwrap();
        let t = s.swapped();
        assert_eq!(t.image_t1, s.image_t2);
        assert_eq!(t.change, s.change);
        assert_eq!(t.derived_change(), t.change);
    }
}
