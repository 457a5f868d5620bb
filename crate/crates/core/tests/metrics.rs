use approx::assert_abs_diff_eq;
use phenocd::metrics::{ConfusionMatrix, MetricsReport};
use phenocd::verify::{metrics_check, oracle_metrics};
use proptest::prelude::*;

fn maps(len: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (prop::collection::vec(0u8..2, len), prop::collection::vec(0u8..2, len))
}

#[test]
fn worked_example() {
    let r = ConfusionMatrix { tp: 50, tn: 0, fp: 10, fn_: 15 }.report();
    assert_abs_diff_eq!(r.precision, 50.0 / 60.0, epsilon = 1e-12);
    assert_abs_diff_eq!(r.recall, 50.0 / 65.0, epsilon = 1e-12);
    assert_abs_diff_eq!(r.f1, 0.8, epsilon = 1e-12);
    assert_abs_diff_eq!(r.iou, 50.0 / 75.0, epsilon = 1e-12);
}

#[test]
fn forced_counts() {
    let all_wrong = ConfusionMatrix::from_maps(&[1; 4096], &[0; 4096]).unwrap();
    assert_eq!(all_wrong, ConfusionMatrix { tp: 0, tn: 0, fp: 4096, fn_: 0 });
    let r = all_wrong.report();
    assert_eq!((r.precision, r.recall, r.f1, r.iou), (0.0, 0.0, 0.0, 0.0));
    let perfect = ConfusionMatrix::from_maps(&[1; 16], &[1; 16]).unwrap().report();
    assert_eq!((perfect.f1, perfect.iou), (1.0, 1.0));
}

#[test]
fn selftest_record_passes() {
    let rec = metrics_check(50, 500, 11);
    assert!(rec.passed(), "{}", rec.to_json_line());
}

#[test]
fn json_carries_split_and_checkpoint() {
    let r: MetricsReport = ConfusionMatrix { tp: 1, tn: 1, fp: 1, fn_: 1 }.report().with_context("test", "stage3/ckpt-best");
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(v["split"], "test");
    assert_eq!(v["checkpoint"], "stage3/ckpt-best");
    assert_eq!(v["confusion"]["fn"], 1);
}

proptest! {
    #[test]
    fn counts_match_oracle((pred, gt) in maps(257)) {
        let main = ConfusionMatrix::from_maps(&pred, &gt).unwrap().report();
        let oracle = oracle_metrics(&pred, &gt);
        prop_assert_eq!(main.confusion, oracle.confusion);
        prop_assert!((main.f1 - oracle.f1).abs() < 1e-12);
        prop_assert!((main.iou - oracle.iou).abs() < 1e-12);
    }

    #[test]
    fn f1_is_a_function_of_iou(tp in 0u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000) {
        let r = ConfusionMatrix { tp, tn: 0, fp, fn_ }.report();
        prop_assert!((r.f1 - 2.0 * r.iou / (1.0 + r.iou)).abs() < 1e-12);
        prop_assert!(r.iou <= r.f1 + 1e-15);
    }

    #[test]
    fn accumulation_is_additive((a, b) in maps(64), (c, d) in maps(32)) {
        let mut cm = ConfusionMatrix::default();
        cm.accumulate(&a, &b).unwrap();
        cm.accumulate(&c, &d).unwrap();
        let mut joined_p = a.clone();
        joined_p.extend(&c);
        let mut joined_g = b.clone();
        joined_g.extend(&d);
        prop_assert_eq!(cm, ConfusionMatrix::from_maps(&joined_p, &joined_g).unwrap());
        prop_assert_eq!(cm.total(), 96);
    }
}
