use phenocd::constrainer::{
    clem_loss, infonce, plm_loss, region_prototypes, select_samples, ClassCentroids, ClemForm, PhenoCentroidBank,
    PixelField, SampleMode, SamplingConfig, Task,
};
use phenocd::verify::{loss_discrepancy, oracle_infonce, ContrastCase, LOSS_TOLERANCE};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

fn unit_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, dim).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3)).prop_map(unit)
}

fn losses(case: &ContrastCase) -> (f64, f64, f64) {
    let protos = region_prototypes(&case.embeddings, case.dim, &case.labels, case.layout, case.min_region_pixels)
        .unwrap()
        .prototypes;
    let run = |form| {
        clem_loss(&case.embeddings, case.dim, case.layout, &case.clem, &protos, &case.centroids, &case.params(form)).total
    };
    (
        run(ClemForm::Separate),
        run(ClemForm::Union),
        plm_loss(&case.embeddings, case.dim, &case.plm, &case.centroids, case.tau),
    )
}

#[test]
fn worked_infonce_values() {
    let a = [1.0, 0.0];
    let v = infonce(&a, &a, &[&a, &a, &a], 1.0);
    assert!((v - 4.0f64.ln()).abs() < 1e-12);
    let far = infonce(&a, &a, &[&[-1.0, 0.0]], 1.0);
    assert!((far - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
    assert_eq!(infonce(&a, &a, &[], 0.1), 0.0);
    let orth = infonce(&a, &a, &[&[0.0, 1.0]], 1.0);
    assert!((orth - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    let hot = infonce(&a, &[0.6, 0.8], &[&[-1.0, 0.0], &[0.0, 1.0]], 1e6);
    assert!((hot - 3.0f64.ln()).abs() < 1e-3);
}

#[test]
fn hundred_random_batches_agree_with_oracle() {
    for seed in 0..100 {
        let case = ContrastCase::random(seed).unwrap();
        let d = loss_discrepancy(&case).unwrap();
        assert!(d < LOSS_TOLERANCE, "seed {seed}: discrepancy {d:e}");
    }
}

/// With one centroid per class every row shares its class's centroid, so the
/// PLM draw coincides with the CLEM draw and no centroid is a negative.
#[test]
fn single_centroid_plm_reduces_to_pixel_term() {
    for seed in 0..20 {
        let case = ContrastCase::random(seed).unwrap();
        let classes: Vec<usize> = {
            let mut c = case.labels.clone();
            c.sort_unstable();
            c.dedup();
            c
        };
        let bank = PhenoCentroidBank {
            dim: case.dim,
            seed,
            classes: classes
                .iter()
                .map(|&class| ClassCentroids {
                    class,
                    k: 1,
                    vectors: vec![unit(vec![1.0; case.dim])],
                    counts: vec![1],
                    iterations: 0,
                    inertia: 0.0,
                })
                .collect(),
        };
        let assignment = bank.assign(&case.embeddings, case.dim, &case.labels);
        let hardness: Vec<f64> = (0..case.labels.len()).map(|i| (i as f64 * 0.37).fract()).collect();
        let cfg = SamplingConfig::default();
        let mut field = PixelField {
            dim: case.dim,
            embeddings: &case.embeddings,
            labels: &case.labels,
            hardness: &hardness,
            centroids: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clem = select_samples(&field, Task::Segmentation, SampleMode::Clem, &cfg, &mut rng.clone()).unwrap();
        field.centroids = Some(&assignment);
        let plm = select_samples(&field, Task::Segmentation, SampleMode::Plm, &cfg, &mut rng).unwrap();

        let protos = region_prototypes(&case.embeddings, case.dim, &case.labels, case.layout, 1).unwrap().prototypes;
        let pp = clem_loss(
            &case.embeddings,
            case.dim,
            case.layout,
            &clem,
            &protos,
            &[],
            &case.params(ClemForm::Separate),
        )
        .pp;
        let l = plm_loss(&case.embeddings, case.dim, &plm, &bank.negative_rows(), case.tau);
        assert!((l - pp).abs() < 1e-9, "seed {seed}: plm {l} vs pp {pp}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn infonce_is_non_negative(
        anchor in unit_vec(4),
        positive in unit_vec(4),
        negatives in prop::collection::vec(unit_vec(4), 1..10),
        tau in 0.05f64..2.0,
    ) {
        let refs: Vec<&[f64]> = negatives.iter().map(Vec::as_slice).collect();
        let v = infonce(&anchor, &positive, &refs, tau);
        prop_assert!(v >= 0.0);
        prop_assert!((v - oracle_infonce(&anchor, &positive, &negatives, tau)).abs() < 1e-9);
    }

    #[test]
    fn negative_order_does_not_matter(seed in 0u64..10_000, shuffle in any::<u64>()) {
        let case = ContrastCase::random(seed).unwrap();
        let before = losses(&case);
        let mut permuted = case.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
        for s in permuted.clem.samples.iter_mut().chain(permuted.plm.samples.iter_mut()) {
            s.negatives.shuffle(&mut rng);
        }
        permuted.centroids.shuffle(&mut rng);
        let after = losses(&permuted);
        prop_assert!((before.0 - after.0).abs() < 1e-9);
        prop_assert!((before.1 - after.1).abs() < 1e-9);
        prop_assert!((before.2 - after.2).abs() < 1e-9);
    }

    #[test]
    fn random_batches_agree_with_oracle(seed in 0u64..1_000_000) {
        let case = ContrastCase::random(seed).unwrap();
        prop_assert!(loss_discrepancy(&case).unwrap() < LOSS_TOLERANCE);
    }

    #[test]
    fn losses_are_non_negative(seed in 0u64..1_000_000) {
        let case = ContrastCase::random(seed).unwrap();
        let (sep, uni, plm) = losses(&case);
        prop_assert!(sep >= 0.0 && uni >= 0.0 && plm >= 0.0);
    }

    #[test]
    fn plm_batches_keep_positives_on_their_centroid(seed in 0u64..1_000_000) {
        let case = ContrastCase::random(seed).unwrap();
        for s in &case.plm.samples {
            prop_assert_eq!(case.labels[s.positive], s.class);
            prop_assert!(s.centroid.is_some());
        }
    }
}
