use std::collections::BTreeMap;

use phenocd::constrainer::cluster::cosine_inertia;
use phenocd::constrainer::{cluster_phenology, spherical_kmeans, PhenoCentroidBank};
use phenocd::metrics::adjusted_rand_index;
use phenocd::verify::{kmeans_check, oracle_kmeans};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

/// `per` noisy points around each of `centers`, labelled by center.
fn planted(centers: &[Vec<f64>], per: usize, noise: f64, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..per {
            pts.push(unit(c.iter().map(|x| x + noise * rng.random_range(-1.0..1.0)).collect()));
            labels.push(k);
        }
    }
    (pts, labels)
}

fn points(max_n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(
        prop::collection::vec(-1.0f64..1.0, dim).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3)).prop_map(unit),
        2..max_n,
    )
}

#[test]
fn main_clusterer_stays_near_exhaustive_optimum() {
    let record = kmeans_check(30, 77);
    assert!(record.passed(), "{}", record.to_json_line());
}

#[test]
fn separated_clusters_are_recovered_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let centers = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![-1.0, 0.0, 0.0]];
    let (pts, truth) = planted(&centers, 50, 0.15, &mut rng);
    let run = spherical_kmeans(&pts, 4, 4, 9).unwrap();
    assert!((adjusted_rand_index(&run.assignment, &truth) - 1.0).abs() < 1e-12);
}

#[test]
fn oracle_agrees_on_small_planted_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let centers = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
    let (pts, truth) = planted(&centers, 4, 0.1, &mut rng);
    let best = oracle_kmeans(&pts, 3).unwrap();
    assert!((adjusted_rand_index(&best.assignment, &truth) - 1.0).abs() < 1e-12);
    let run = spherical_kmeans(&pts, 3, 4, 1).unwrap();
    assert!(run.inertia() <= best.inertia * 1.05 + 1e-12);
}

#[test]
fn small_classes_get_fewer_centroids() {
    let mut samples = BTreeMap::new();
    samples.insert(0, vec![unit(vec![1.0, 0.1]), unit(vec![0.9, 0.2])]);
    samples.insert(2, (0..10).map(|i| unit(vec![i as f64, 1.0])).collect());
    samples.insert(3, Vec::new());
    let bank = cluster_phenology(&samples, 3, 2, 0).unwrap();
    assert_eq!(bank.classes.len(), 2);
    assert_eq!(bank.get(0).unwrap().k, 2);
    assert_eq!(bank.get(2).unwrap().k, 3);
    assert!(bank.get(3).is_none());
    for c in &bank.classes {
        assert_eq!(c.counts.iter().sum::<usize>(), samples[&c.class].len());
    }
}

#[test]
fn bank_round_trips_through_json() {
    let mut samples = BTreeMap::new();
    samples.insert(1, (0..8).map(|i| unit(vec![1.0, i as f64, -0.5])).collect());
    let bank = cluster_phenology(&samples, 2, 2, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("centroids.json");
    bank.save(&path).unwrap();
    assert_eq!(PhenoCentroidBank::load(&path).unwrap(), bank);
}

#[test]
fn single_centroid_classes_contribute_no_negatives() {
    let mut samples = BTreeMap::new();
    samples.insert(0, vec![unit(vec![1.0, 0.0])]);
    samples.insert(1, vec![unit(vec![0.0, 1.0]), unit(vec![0.1, 1.0]), unit(vec![-1.0, 0.2])]);
    let bank = cluster_phenology(&samples, 2, 1, 0).unwrap();
    let rows = bank.negative_rows();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.class == 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inertia_never_increases(pts in points(40, 4), k in 1usize..5, seed in any::<u64>()) {
        let k = k.min(pts.len());
        let run = spherical_kmeans(&pts, k, 1, seed).unwrap();
        for w in run.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * (1.0 + w[0].abs()), "{:?}", run.inertia_history);
        }
        let recomputed = cosine_inertia(&pts, &run.centroids, &run.assignment);
        prop_assert!((recomputed - run.inertia()).abs() < 1e-9);
    }

    #[test]
    fn never_worse_than_exhaustive_by_much_on_tight_clusters(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..3).map(|_| unit((0..3).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let (pts, _) = planted(&centers, 3, 0.05, &mut rng);
        let best = oracle_kmeans(&pts, 3).unwrap();
        let run = spherical_kmeans(&pts, 3, 8, seed).unwrap();
        prop_assert!(run.inertia() >= best.inertia - 1e-9);
    }

    #[test]
    fn ari_ignores_label_names(labels in prop::collection::vec(0usize..4, 2..60), shift in 1usize..10) {
        let renamed: Vec<usize> = labels.iter().map(|l| (l + shift) * 7).collect();
        prop_assert!((adjusted_rand_index(&labels, &renamed) - 1.0).abs() < 1e-12);
        let a = adjusted_rand_index(&labels, &labels.iter().rev().copied().collect::<Vec<_>>());
        prop_assert!(a <= 1.0 + 1e-12);
    }
}
