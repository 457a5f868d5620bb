//! Anchor, positive and negative selection for the contrastive losses.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Categories are land-cover classes of the per-date embeddings.
    Segmentation,
    /// Anchors are changed pixels of the fused embeddings.
    CdChanged,
    /// Anchors are unchanged pixels of the fused embeddings.
    CdUnchanged,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Segmentation, Task::CdChanged, Task::CdUnchanged];

    pub fn name(self) -> &'static str {
        match self {
            Task::Segmentation => "segmentation",
            Task::CdChanged => "cd_changed",
            Task::CdUnchanged => "cd_unchanged",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Clem,
    Plm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub anchors_per_class: usize,
    pub positive_candidates: usize,
    pub negatives: usize,
    /// In PLM mode, keep negatives to other classes only instead of also
    /// pushing away same-class pixels of another centroid.
    pub strict_class_negatives: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            anchors_per_class: 16,
            positive_candidates: 8,
            negatives: 64,
            strict_class_negatives: false,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchors_per_class == 0 {
            return Err(Error::config("anchors_per_class", "must be positive"));
        }
        if self.positive_candidates == 0 {
            return Err(Error::config("positive_candidates", "must be positive"));
        }
        if self.negatives == 0 {
            return Err(Error::config("negatives", "must be positive"));
        }
        Ok(())
    }
}

/// Row-major `rows×dim` embedding matrix with per-row labels.
#[derive(Debug, Clone, Copy)]
pub struct PixelField<'a> {
    pub dim: usize,
    pub embeddings: &'a [f64],
    /// Category of each row: class id, or change state for the cd tasks.
    pub labels: &'a [usize],
    /// Predicted probability of the row's true category; lower is harder.
    pub hardness: &'a [f64],
    /// Centroid assignment within the row's class (PLM mode only).
    pub centroids: Option<&'a [usize]>,
}

impl<'a> PixelField<'a> {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    fn validate(&self) -> Result<()> {
        let r = self.labels.len();
        if self.dim == 0 || self.embeddings.len() != r * self.dim || self.hardness.len() != r {
            return Err(Error::shape(
                "select_samples",
                format!(
                    "{} values, {} labels, {} hardness for dim {}",
                    self.embeddings.len(),
                    r,
                    self.hardness.len(),
                    self.dim
                ),
            ));
        }
        if self.centroids.is_some_and(|c| c.len() != r) {
            return Err(Error::shape("select_samples", "centroid assignment length differs from rows"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSample {
    pub anchor: usize,
    pub class: usize,
    pub centroid: Option<usize>,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Selected rows for one task; all indices refer to the rows of the
/// [`PixelField`] the batch was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub task: Task,
    pub mode: SampleMode,
    pub samples: Vec<AnchorSample>,
}

impl ContrastiveBatch {
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn anchor_classes(task: Task, by_class: &BTreeMap<usize, Vec<usize>>) -> Vec<usize> {
    let eligible = |c: usize| by_class.get(&c).is_some_and(|m| m.len() >= 2);
    match task {
        Task::Segmentation => by_class.keys().copied().filter(|&c| eligible(c)).collect(),
        Task::CdChanged => [1].into_iter().filter(|&c| eligible(c)).collect(),
        Task::CdUnchanged => [0].into_iter().filter(|&c| eligible(c)).collect(),
    }
}

/// Draws the anchors of one task.
///
/// Per anchor class, the `anchors_per_class` rows with the lowest true-class
/// probability become anchors. The positive is the least similar of up to
/// `positive_candidates` random same-category rows (same centroid too in PLM
/// mode). Negatives are the most similar half of the negative pool plus a
/// uniform draw from the rest. Anchors with no positive or negative candidates
/// are skipped; fewer than two categories yields an empty batch.
pub fn select_samples(
    field: &PixelField<'_>,
    task: Task,
    mode: SampleMode,
    config: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<ContrastiveBatch> {
    field.validate()?;
    let centroids = match (mode, field.centroids) {
        (SampleMode::Plm, None) => {
            return Err(Error::Precondition("plm sampling needs centroid assignments".into()));
        }
        (SampleMode::Plm, Some(c)) => Some(c),
        (SampleMode::Clem, _) => None,
    };
    let mut batch = ContrastiveBatch {
        task,
        mode,
        samples: Vec::new(),
    };
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in field.labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Ok(batch);
    }

    let mut sims: Vec<(f64, usize)> = Vec::new();
    for class in anchor_classes(task, &by_class) {
        let members = &by_class[&class];
        let mut order = members.clone();
        order.sort_by(|&a, &b| field.hardness[a].total_cmp(&field.hardness[b]).then(a.cmp(&b)));
        order.truncate(config.anchors_per_class);
        let other: Vec<usize> = (0..field.rows()).filter(|&i| field.labels[i] != class).collect();

        for anchor in order {
            let a = field.row(anchor);
            let own = centroids.map(|c| c[anchor]);
            let pos_pool: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&i| i != anchor && own.is_none_or(|k| centroids.is_some_and(|c| c[i] == k)))
                .collect();
            if pos_pool.is_empty() {
                continue;
            }
            let picks = index::sample(rng, pos_pool.len(), config.positive_candidates.min(pos_pool.len()));
            let positive = picks
                .iter()
                .map(|j| pos_pool[j])
                .min_by(|&x, &y| dot(a, field.row(x)).total_cmp(&dot(a, field.row(y))).then(x.cmp(&y)))
                .expect("non-empty candidate draw");

            let mut neg_pool = other.clone();
            if let (Some(k), Some(c), false) = (own, centroids, config.strict_class_negatives) {
                neg_pool.extend(members.iter().copied().filter(|&i| c[i] != k));
                neg_pool.sort_unstable();
            }
            if neg_pool.is_empty() {
                continue;
            }
            sims.clear();
            sims.extend(neg_pool.iter().map(|&i| (dot(a, field.row(i)), i)));
            sims.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
            let n_hard = (config.negatives / 2).min(sims.len());
            let mut negatives: Vec<usize> = sims[..n_hard].iter().map(|s| s.1).collect();
            let rest: Vec<usize> = sims[n_hard..].iter().map(|s| s.1).collect();
            let n_rand = (config.negatives - n_hard).min(rest.len());
            negatives.extend(index::sample(rng, rest.len(), n_rand).iter().map(|j| rest[j]));

            batch.samples.push(AnchorSample {
                anchor,
                class,
                centroid: own,
                positive,
                negatives,
            });
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        for r in v.chunks_mut(dim) {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter_mut().for_each(|x| *x /= n);
        }
        v
    }

    #[test]
    fn two_by_two_pools_follow_class() {
        // [[A,A],[B,B]]
        let emb = vec![1.0, 0.0, 0.8, 0.6, 0.0, 1.0, 0.6, 0.8];
        let labels = [0, 0, 1, 1];
        let hardness = [0.1, 0.9, 0.5, 0.5];
        let field = PixelField {
            dim: 2,
            embeddings: &emb,
            labels: &labels,
            hardness: &hardness,
            centroids: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = select_samples(&field, Task::Segmentation, SampleMode::Clem, &SamplingConfig::default(), &mut rng)
            .unwrap();
        let s = b.samples.iter().find(|s| s.anchor == 0).unwrap();
        assert_eq!(s.positive, 1);
        let mut neg = s.negatives.clone();
        neg.sort_unstable();
        assert_eq!(neg, vec![2, 3]);
    }

    #[test]
    fn single_class_is_empty() {
        let emb = vec![1.0, 0.0, 0.0, 1.0];
        let field = PixelField {
            dim: 2,
            embeddings: &emb,
            labels: &[3, 3],
            hardness: &[0.5, 0.5],
            centroids: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = select_samples(&field, Task::Segmentation, SampleMode::Clem, &SamplingConfig::default(), &mut rng)
            .unwrap();
        assert!(b.is_empty());
    }

    #[test]
    fn anchor_never_in_own_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..1000 {
            let rows = 24;
            let emb = unit_rows(&mut rng, rows, 4);
            let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..3)).collect();
            let hardness: Vec<f64> = (0..rows).map(|_| rng.random::<f64>()).collect();
            let cents: Vec<usize> = (0..rows).map(|_| rng.random_range(0..2)).collect();
            let mode = if trial % 2 == 0 { SampleMode::Clem } else { SampleMode::Plm };
            let field = PixelField {
                dim: 4,
                embeddings: &emb,
                labels: &labels,
                hardness: &hardness,
                centroids: Some(&cents),
            };
            let cfg = SamplingConfig {
                negatives: 8,
                ..SamplingConfig::default()
            };
            let b = select_samples(&field, Task::Segmentation, mode, &cfg, &mut rng).unwrap();
            for s in &b.samples {
                assert!(!s.negatives.contains(&s.anchor));
                assert_ne!(s.positive, s.anchor);
                assert_eq!(labels[s.positive], s.class);
                if mode == SampleMode::Plm {
                    assert_eq!(cents[s.positive], cents[s.anchor]);
                }
            }
        }
    }

    #[test]
    fn plm_with_one_centroid_matches_clem() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows = 40;
        let emb = unit_rows(&mut rng, rows, 6);
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..4)).collect();
        let hardness: Vec<f64> = (0..rows).map(|_| rng.random::<f64>()).collect();
        let zeros = vec![0; rows];
        let field = PixelField {
            dim: 6,
            embeddings: &emb,
            labels: &labels,
            hardness: &hardness,
            centroids: Some(&zeros),
        };
        let cfg = SamplingConfig {
            negatives: 10,
            ..SamplingConfig::default()
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = r1.clone();
        let a = select_samples(&field, Task::Segmentation, SampleMode::Clem, &cfg, &mut r1).unwrap();
        let b = select_samples(&field, Task::Segmentation, SampleMode::Plm, &cfg, &mut r2).unwrap();
        assert_eq!(a.samples.len(), b.samples.len());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!((x.anchor, x.positive, &x.negatives), (y.anchor, y.positive, &y.negatives));
        }
    }

    #[test]
    fn cd_tasks_pick_their_state() {
        let emb = vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8, 0.8, 0.6];
        let labels = [0, 0, 1, 1];
        let field = PixelField {
            dim: 2,
            embeddings: &emb,
            labels: &labels,
            hardness: &[0.5; 4],
            centroids: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SamplingConfig::default();
        let ch = select_samples(&field, Task::CdChanged, SampleMode::Clem, &cfg, &mut rng).unwrap();
        assert!(ch.samples.iter().all(|s| labels[s.anchor] == 1));
        let un = select_samples(&field, Task::CdUnchanged, SampleMode::Clem, &cfg, &mut rng).unwrap();
        assert!(un.samples.iter().all(|s| labels[s.anchor] == 0));
        assert_eq!(ch.samples.len(), 2);
    }
}
