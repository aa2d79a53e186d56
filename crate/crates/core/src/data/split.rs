use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};

/// Train/validation/test fractions and the shuffling seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train, self.val, self.test];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_err!("split fractions must lie in [0, 1] and sum to 1"));
        }
        Ok(())
    }

    /// Partition sizes for `n` items: train and val are rounded, test takes the rest.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let tr = ((n as f64) * self.train).round() as usize;
        let va = (((n as f64) * self.val).round() as usize).min(n - tr.min(n));
        let tr = tr.min(n);
        (tr, va, n - tr - va)
    }
}

/// Shuffles with `spec.seed` and cuts into disjoint train/val/test parts.
pub fn split<T: Clone>(items: &[T], spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    spec.validate()?;
    if items.len() < 10 {
        return Err(input_err!("need at least 10 items to split, got {}", items.len()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let (tr, va, _) = spec.sizes(items.len());
    let take = |ix: &[usize]| ix.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((take(&order[..tr]), take(&order[tr..tr + va]), take(&order[tr + va..])))
}

/// Uniform sample of `n` items without replacement, kept in source order.
/// Asking for at least as many items as exist returns all of them.
pub fn subsample<T: Clone>(items: &[T], n: usize, seed: u64) -> Result<Vec<T>> {
    if n == 0 {
        return Err(input_err!("subsample size must be at least 1"));
    }
    if n >= items.len() {
        return Ok(items.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, items.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| items[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn default_fractions_on_a_hundred() {
        let items: Vec<u32> = (0..100).collect();
        let (a, b, c) = split(&items, &SplitSpec::default()).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (70, 10, 20));
    }

    #[test]
    fn too_few_items_is_an_error() {
        let items: Vec<u32> = (0..9).collect();
        assert!(split(&items, &SplitSpec::default()).is_err());
    }

    #[test]
    fn bad_fractions_are_config_errors() {
        let spec = SplitSpec {
            train: 0.8,
            ..Default::default()
        };
        assert_eq!(split(&[0; 20], &spec).unwrap_err().kind(), "config");
    }

    #[test]
    fn subsample_edges() {
        let items: Vec<u32> = (0..5).collect();
        assert_eq!(subsample(&items, 9, 1).unwrap(), items);
        assert!(subsample(&items, 0, 1).is_err());
        assert_eq!(subsample(&items, 3, 4).unwrap(), subsample(&items, 3, 4).unwrap());
    }

    proptest! {
        #[test]
        fn split_is_a_deterministic_partition(n in 10usize..400, seed in any::<u64>()) {
            let items: Vec<usize> = (0..n).collect();
            let spec = SplitSpec { seed, ..Default::default() };
            let (a, b, c) = split(&items, &spec).unwrap();
            let all: BTreeSet<usize> = a.iter().chain(&b).chain(&c).copied().collect();
            prop_assert_eq!(all.len(), n);
            prop_assert_eq!(a.len() + b.len() + c.len(), n);
            prop_assert_eq!(split(&items, &spec).unwrap(), (a, b, c));
        }

        #[test]
        fn subsample_is_a_subset_without_repeats(n in 1usize..200, k in 1usize..250, seed in any::<u64>()) {
            let items: Vec<usize> = (0..n).collect();
            let s = subsample(&items, k, seed).unwrap();
            prop_assert_eq!(s.len(), k.min(n));
            let set: BTreeSet<usize> = s.iter().copied().collect();
            prop_assert_eq!(set.len(), s.len());
        }
    }
}
