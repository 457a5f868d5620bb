use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `(train, val, test)` sizes: val and test are floored, train takes the rest.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 {
        return Err(Error::config("split_ratios", "all ratios must be positive"));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::config("split_ratios", format!("ratios sum to {}, not 1", a + b + c)));
    }
    if n < 3 {
        return Err(Error::Precondition(format!("need at least 3 samples to split, got {n}")));
    }
    // the small epsilon absorbs representation error such as 10 × 0.1
    let val = (n as f64 * b + 1e-9).floor() as usize;
    let test = (n as f64 * c + 1e-9).floor() as usize;
    Ok((n - val - test, val, test))
}

/// Seeded shuffle followed by a floor-based partition.
pub fn split_dataset<S>(items: Vec<S>, ratios: (f64, f64, f64), seed: u64) -> Result<(Vec<S>, Vec<S>, Vec<S>)> {
    let (n_train, n_val, _) = split_sizes(items.len(), ratios)?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<S>> = items.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<S> { idx.iter().map(|&i| slots[i].take().expect("each index once")).collect() };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_sizes() {
        assert_eq!(split_sizes(2400, (0.8, 0.1, 0.1)).unwrap(), (1920, 240, 240));
        assert_eq!(split_sizes(10, (0.8, 0.1, 0.1)).unwrap(), (8, 1, 1));
        assert_eq!(split_sizes(100, (0.8, 0.1, 0.1)).unwrap(), (80, 10, 10));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(split_sizes(2, (0.8, 0.1, 0.1)).is_err());
        assert!(split_sizes(10, (0.8, 0.2, 0.0)).is_err());
        assert!(split_sizes(10, (0.5, 0.1, 0.1)).is_err());
    }

    #[test]
    fn seeded_shuffle_is_reproducible() {
        let a = split_dataset((0..50).collect(), (0.8, 0.1, 0.1), 7).unwrap();
        let b = split_dataset((0..50).collect(), (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn partition_is_disjoint_and_exhaustive(n in 3usize..300, seed in any::<u64>()) {
            let (tr, va, te) = split_dataset((0..n).collect::<Vec<_>>(), (0.8, 0.1, 0.1), seed).unwrap();
            let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
