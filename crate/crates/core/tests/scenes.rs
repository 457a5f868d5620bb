use phenocd::config::RunConfig;
use phenocd::orchestrator::Dataset;
use phenocd::scenegen::{generate_dataset, ClassPalette, SceneConfig};
use phenocd::Error;
use proptest::prelude::*;

fn small_scene(seed: u64) -> SceneConfig {
    SceneConfig {
        height: 16,
        width: 24,
        blob_count: (2, 5),
        seed,
        ..SceneConfig::default()
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    let cfg = small_scene(4);
    let data = Dataset::generate(&cfg, 10, (0.6, 0.2, 0.2)).unwrap();
    assert_eq!(data.train.len() + data.val.len() + data.test.len(), 10);
    let dir = tempfile::tempdir().unwrap();
    data.write(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.palette, data.palette);
    for (a, b) in data.train.iter().chain(&data.val).chain(&data.test).zip(back.train.iter().chain(&back.val).chain(&back.test)) {
        assert_eq!(a.sample_id, b.sample_id);
        assert_eq!(a.change, b.change);
        assert_eq!(a.sem_t1, b.sem_t1);
        assert_eq!(a.stage_t2, b.stage_t2);
        let worst = a.image_t1.iter().zip(&b.image_t1).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn same_seed_same_scenes() {
    let palette = ClassPalette::standard(4, 4).unwrap();
    let a = generate_dataset(&small_scene(9), &palette, 4).unwrap();
    let b = generate_dataset(&small_scene(9), &palette, 4).unwrap();
    let c = generate_dataset(&small_scene(10), &palette, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn dataset_check_rejects_mismatched_sizes_and_classes() {
    let data = Dataset::generate(&small_scene(1), 5, (0.6, 0.2, 0.2)).unwrap();
    let mut cfg = RunConfig::small();
    assert!(matches!(data.check(&cfg), Err(Error::Ingestion { .. })));
    cfg.detector.height = 16;
    cfg.detector.width = 24;
    cfg.detector.spb_scales = vec![1, 2, 4];
    assert!(data.check(&cfg).is_ok());
    cfg.detector.num_classes = 5;
    assert!(matches!(data.check(&cfg), Err(Error::Validation(_))));
}

#[test]
fn too_few_samples_are_rejected() {
    let err = Dataset::generate(&small_scene(0), 2, (0.8, 0.1, 0.1)).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)), "{err}");
    let mut cfg = RunConfig::small();
    cfg.dataset.count = 2;
    assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn planted_maps_are_consistent(seed in any::<u64>(), cf in 0.0f64..0.5, pf in 0.0f64..1.0) {
        let cfg = SceneConfig { change_fraction: cf, pseudo_change_fraction: pf, ..small_scene(seed) };
        let palette = ClassPalette::standard(cfg.num_classes, cfg.num_stages).unwrap();
        let s = &generate_dataset(&cfg, &palette, 1).unwrap()[0];
        prop_assert_eq!(&s.change, &s.derived_change());
        prop_assert!(s.image_t1.iter().chain(&s.image_t2).all(|v| (0.0..=1.0).contains(v)));
        for (p, pseudo) in s.pseudo_change_mask().into_iter().enumerate() {
            if pseudo {
                prop_assert_eq!(s.change[p], 0);
            }
        }
        let sw = s.swapped();
        prop_assert_eq!(&sw.sem_t1, &s.sem_t2);
        prop_assert_eq!(&sw.change, &s.change);
    }
}
