//! Per-class spherical k-means over embedding samples.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::contrast::CentroidRow;

pub const MAX_ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-6;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-12 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// `Σ (1 − cos)` after every assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().unwrap_or(&0.0)
    }
}

/// Cosine inertia `Σ_i (1 − x_i·c_{a(i)})`.
pub fn cosine_inertia(points: &[Vec<f64>], centroids: &[Vec<f64>], assignment: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &a)| 1.0 - dot(p, &centroids[a]))
        .sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let s = dot(p, c);
        if s > best_sim {
            best_sim = s;
            best = k;
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| (1.0 - dot(p, &centroids[0])).max(0.0)).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, d) in dist.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        };
        let c = points[pick].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min((1.0 - dot(p, &c)).max(0.0));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KMeansResult {
    let dim = points[0].len();
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut history = vec![cosine_inertia(points, &centroids, &assignment)];
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut movement: f64 = 0.0;
        for (k, sum) in sums.into_iter().enumerate() {
            // An emptied cluster keeps its centroid.
            if counts[k] == 0 {
                continue;
            }
            let next = normalized(sum);
            let shift = next.iter().zip(&centroids[k]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            movement = movement.max(shift);
            centroids[k] = next;
        }
        assignment = points.iter().map(|p| nearest(p, &centroids)).collect();
        let inertia = cosine_inertia(points, &centroids, &assignment);
        let prev = *history.last().expect("history starts non-empty");
        debug_assert!(inertia <= prev + 1e-9 * (1.0 + prev.abs()), "inertia rose from {prev} to {inertia}");
        history.push(inertia);
        if movement < TOLERANCE {
            break;
        }
    }
    KMeansResult {
        centroids,
        assignment,
        inertia_history: history,
        iterations,
    }
}

/// Spherical k-means on unit vectors: k-means++ seeding, cosine assignment,
/// mean-then-renormalize updates, at most [`MAX_ITERATIONS`] rounds or until
/// no centroid moves by [`TOLERANCE`]. The best of `restarts` seedings wins.
/// Points are renormalized in `f64` first, so inputs rounded from `f32` keep
/// the inertia non-negative and monotone.
pub fn spherical_kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<KMeansResult> {
    if points.is_empty() {
        return Err(Error::Precondition("k-means needs at least one point".into()));
    }
    if k == 0 || k > points.len() {
        return Err(Error::Precondition(format!("k = {k} for {} points", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::shape("spherical_kmeans", "points of different dimension"));
    }
    let points: Vec<Vec<f64>> = points.iter().map(|p| normalized(p.clone())).collect();
    let points = points.as_slice();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let init = plus_plus_init(points, k, &mut rng);
        let run = lloyd(points, init);
        if best.as_ref().is_none_or(|b| run.inertia() < b.inertia()) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCentroids {
    pub class: usize,
    pub k: usize,
    pub vectors: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub iterations: usize,
    pub inertia: f64,
}

/// Per-class phenological centroids, persisted as `centroids.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenoCentroidBank {
    pub dim: usize,
    pub seed: u64,
    pub classes: Vec<ClassCentroids>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub centroids_per_class: usize,
    pub max_samples_per_class: usize,
    pub restarts: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            centroids_per_class: 4,
            max_samples_per_class: 10_000,
            restarts: 4,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.centroids_per_class == 0 {
            return Err(Error::config("centroids_per_class", "must be positive"));
        }
        if self.max_samples_per_class == 0 {
            return Err(Error::config("max_samples_per_class", "must be positive"));
        }
        Ok(())
    }
}

/// Clusters each class's samples independently. Classes with fewer samples
/// than `k` use one centroid per sample; empty classes are omitted.
pub fn cluster_phenology(
    samples: &BTreeMap<usize, Vec<Vec<f64>>>,
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<PhenoCentroidBank> {
    let mut dim = 0;
    let mut classes = Vec::new();
    for (&class, points) in samples {
        if points.is_empty() {
            log::warn!("class {class} has no samples; omitted from the centroid bank");
            continue;
        }
        let kc = if points.len() < k {
            log::warn!("class {class} has {} samples; reducing K from {k}", points.len());
            points.len()
        } else {
            k
        };
        dim = points[0].len();
        let class_seed = seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let run = spherical_kmeans(points, kc, restarts, class_seed)?;
        let mut counts = vec![0; kc];
        for &a in &run.assignment {
            counts[a] += 1;
        }
        classes.push(ClassCentroids {
            class,
            k: kc,
            vectors: run.centroids.clone(),
            counts,
            iterations: run.iterations,
            inertia: run.inertia(),
        });
    }
    Ok(PhenoCentroidBank { dim, seed, classes })
}

impl PhenoCentroidBank {
    pub fn get(&self, class: usize) -> Option<&ClassCentroids> {
        self.classes.iter().find(|c| c.class == class)
    }

    /// Nearest centroid of each row within its own class; rows of classes
    /// absent from the bank get centroid 0.
    pub fn assign(&self, embeddings: &[f64], dim: usize, labels: &[usize]) -> Vec<usize> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &c)| match self.get(c) {
                Some(cc) => nearest(&embeddings[i * dim..(i + 1) * dim], &cc.vectors),
                None => 0,
            })
            .collect()
    }

    /// Centroids usable as negatives: those of classes with more than one
    /// centroid. A single centroid carries no stage information, so with
    /// `K = 1` the PLM objective reduces to the pixel term alone.
    pub fn negative_rows(&self) -> Vec<CentroidRow> {
        self.classes
            .iter()
            .filter(|c| c.k > 1)
            .flat_map(|c| {
                c.vectors.iter().map(|v| CentroidRow {
                    class: c.class,
                    vector: v.clone(),
                })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("centroids", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

/// Uniform fixed-size sample of a stream (Algorithm R).
#[derive(Debug, Clone)]
pub struct Reservoir<T> {
    cap: usize,
    seen: usize,
    items: Vec<T>,
}

impl<T> Reservoir<T> {
    pub fn new(cap: usize) -> Self {
        Self {
            cap,
            seen: 0,
            items: Vec::new(),
        }
    }

    pub fn push(&mut self, item: T, rng: &mut impl Rng) {
        self.seen += 1;
        if self.items.len() < self.cap {
            self.items.push(item);
        } else {
            let j = rng.random_range(0..self.seen);
            if j < self.cap {
                self.items[j] = item;
            }
        }
    }

    pub fn seen(&self) -> usize {
        self.seen
    }

    pub fn into_items(self) -> Vec<T> {
        self.items
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        normalized(v.to_vec())
    }

    #[test]
    fn two_tight_pairs() {
        let pts = vec![unit(&[1.0, 0.1]), unit(&[1.0, -0.1]), unit(&[0.1, 1.0]), unit(&[-0.1, 1.0])];
        let r = spherical_kmeans(&pts, 2, 1, 3).unwrap();
        assert_eq!(r.assignment[0], r.assignment[1]);
        assert_eq!(r.assignment[2], r.assignment[3]);
        assert_ne!(r.assignment[0], r.assignment[2]);
        let e1 = &r.centroids[r.assignment[0]];
        assert_relative_eq!(e1[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn single_centroid_is_normalized_mean() {
        let pts = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[1.0, 1.0])];
        let r = spherical_kmeans(&pts, 1, 1, 0).unwrap();
        let mean = unit(&[1.0 + std::f64::consts::FRAC_1_SQRT_2, 1.0 + std::f64::consts::FRAC_1_SQRT_2]);
        assert_relative_eq!(r.centroids[0][0], mean[0], epsilon = 1e-12);
        assert_relative_eq!(r.centroids[0][1], mean[1], epsilon = 1e-12);
    }

    #[test]
    fn inertia_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec<f64>> = (0..200)
            .map(|_| unit(&(0..5).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()))
            .collect();
        let r = spherical_kmeans(&pts, 6, 1, 11).unwrap();
        for w in r.inertia_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn bank_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut samples = BTreeMap::new();
        for c in 0..3 {
            samples.insert(
                c,
                (0..40)
                    .map(|_| unit(&(0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()))
                    .collect::<Vec<_>>(),
            );
        }
        let a = serde_json::to_vec(&cluster_phenology(&samples, 4, 2, 8).unwrap()).unwrap();
        let b = serde_json::to_vec(&cluster_phenology(&samples, 4, 2, 8).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_class_reduces_k_and_empty_class_is_omitted() {
        let mut samples = BTreeMap::new();
        samples.insert(0, vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])]);
        samples.insert(1, Vec::new());
        let bank = cluster_phenology(&samples, 4, 1, 0).unwrap();
        assert_eq!(bank.classes.len(), 1);
        assert_eq!(bank.classes[0].k, 2);
    }

    #[test]
    fn reservoir_caps_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut r = Reservoir::new(10_000);
        for i in 0..50_000 {
            r.push(i, &mut rng);
        }
        assert_eq!(r.seen(), 50_000);
        assert_eq!(r.items().len(), 10_000);
    }
}
