//! Cumulative confusion matrix and the change metrics derived from it.

use std::collections::HashMap;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Adds one binary prediction/ground-truth pair (values must be 0 or 1).
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "accumulate",
                format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len()),
            ));
        }
        let mut local = ConfusionMatrix::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (1, 1) => local.tp += 1,
                (0, 0) => local.tn += 1,
                (1, 0) => local.fp += 1,
                (0, 1) => local.fn_ += 1,
                _ => return Err(Error::Validation(format!("non-binary values pred={p} gt={g}"))),
            }
        }
        *self += local;
        Ok(())
    }

    pub fn from_maps(pred: &[u8], gt: &[u8]) -> Result<Self> {
        let mut cm = Self::default();
        cm.accumulate(pred, gt)?;
        Ok(cm)
    }

    pub fn report(&self) -> MetricsReport {
        compute(self)
    }
}

impl Add for ConfusionMatrix {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub confusion: ConfusionMatrix,
    pub split: String,
    pub checkpoint: String,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Precision, recall, F1 and IoU; every `0/0` evaluates to 0.
pub fn compute(cm: &ConfusionMatrix) -> MetricsReport {
    let (tp, fp, fn_) = (cm.tp as f64, cm.fp as f64, cm.fn_ as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    let iou = ratio(tp, tp + fp + fn_);
    MetricsReport {
        precision,
        recall,
        f1,
        iou,
        confusion: *cm,
        split: String::new(),
        checkpoint: String::new(),
    }
}

impl MetricsReport {
    pub fn with_context(mut self, split: impl Into<String>, checkpoint: impl Into<String>) -> Self {
        self.split = split.into();
        self.checkpoint = checkpoint.into();
        self
    }

    /// Fixed-format JSON with six decimal places; `split` and `checkpoint`
    /// are included when set.
    pub fn to_json(&self) -> String {
        let c = &self.confusion;
        let mut out = format!(
            "{{\"precision\":{:.6},\"recall\":{:.6},\"f1\":{:.6},\"iou\":{:.6},\"confusion\":{{\"tp\":{},\"tn\":{},\"fp\":{},\"fn\":{}}}",
            self.precision, self.recall, self.f1, self.iou, c.tp, c.tn, c.fp, c.fn_
        );
        for (key, value) in [("split", &self.split), ("checkpoint", &self.checkpoint)] {
            if !value.is_empty() {
                out.push_str(&format!(",\"{key}\":{}", serde_json::Value::from(value.as_str())));
            }
        }
        out.push('}');
        out
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    let n = a.len() as f64;
    if a.len() < 2 {
        return 1.0;
    }
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let c2 = |v: u64| (v as f64) * (v as f64 - 1.0) / 2.0;
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sa: f64 = rows.values().map(|&v| c2(v)).sum();
    let sb: f64 = cols.values().map(|&v| c2(v)).sum();
    let expected = sa * sb / (n * (n - 1.0) / 2.0);
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_two_by_two() {
        let cm = ConfusionMatrix::from_maps(&[1, 0, 1, 1], &[1, 1, 0, 1]).unwrap();
        assert_eq!((cm.tp, cm.fn_, cm.fp, cm.tn), (2, 1, 1, 0));
    }

    #[test]
    fn identity_and_inversion() {
        let gt = [0u8, 1, 1, 0, 1];
        let cm = ConfusionMatrix::from_maps(&gt, &gt).unwrap();
        assert_eq!(cm.tp + cm.tn, 5);
        assert_eq!(cm.fp + cm.fn_, 0);
        let inv: Vec<u8> = gt.iter().map(|v| 1 - v).collect();
        let cm = ConfusionMatrix::from_maps(&inv, &gt).unwrap();
        assert_eq!(cm.tp + cm.tn, 0);
    }

    #[test]
    fn non_binary_rejected() {
        assert!(ConfusionMatrix::from_maps(&[2], &[1]).is_err());
        assert!(ConfusionMatrix::from_maps(&[1, 0], &[1]).is_err());
    }

    #[test]
    fn worked_metrics() {
        let cm = ConfusionMatrix {
            tp: 50,
            fp: 10,
            fn_: 15,
            tn: 0,
        };
        let r = compute(&cm);
        assert!((r.precision - 50.0 / 60.0).abs() < 1e-12);
        assert!((r.recall - 50.0 / 65.0).abs() < 1e-12);
        assert!((r.f1 - 0.8).abs() < 1e-12);
        assert!((r.iou - 50.0 / 75.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cases() {
        let r = compute(&ConfusionMatrix {
            tp: 7,
            ..Default::default()
        });
        assert_eq!((r.precision, r.recall, r.f1, r.iou), (1.0, 1.0, 1.0, 1.0));
        let r = compute(&ConfusionMatrix {
            tn: 9,
            ..Default::default()
        });
        assert_eq!((r.precision, r.recall, r.f1, r.iou), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn json_layout() {
        let r = compute(&ConfusionMatrix {
            tp: 50,
            fp: 10,
            fn_: 15,
            tn: 3,
        });
        assert_eq!(
            r.to_json(),
            "{\"precision\":0.833333,\"recall\":0.769231,\"f1\":0.800000,\"iou\":0.666667,\"confusion\":{\"tp\":50,\"tn\":3,\"fp\":10,\"fn\":15}}"
        );
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["confusion"]["fn"], 15);
    }

    #[test]
    fn ari_extremes() {
        assert!((adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]) - 1.0).abs() < 1e-12);
        let r = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]);
        assert!(r < 0.0);
    }

    proptest! {
        #[test]
        fn f1_iou_identity(tp in 0u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000, tn in 0u64..10_000) {
            let r = compute(&ConfusionMatrix { tp, fp, fn_, tn });
            prop_assert!(r.iou <= r.f1 + 1e-15 && r.f1 <= 1.0);
            prop_assert!((r.f1 - 2.0 * r.iou / (1.0 + r.iou)).abs() <= 1e-12);
        }

        #[test]
        fn accumulation_order_free(maps in proptest::collection::vec(proptest::collection::vec((0u8..2, 0u8..2), 1..20), 1..6)) {
            let per: Vec<ConfusionMatrix> = maps.iter().map(|m| {
                let (p, g): (Vec<u8>, Vec<u8>) = m.iter().copied().unzip();
                ConfusionMatrix::from_maps(&p, &g).unwrap()
            }).collect();
            let fwd: ConfusionMatrix = per.iter().copied().sum();
            let rev: ConfusionMatrix = per.iter().rev().copied().sum();
            prop_assert_eq!(fwd, rev);
            prop_assert_eq!(fwd.total(), maps.iter().map(|m| m.len() as u64).sum::<u64>());
        }
    }
}
