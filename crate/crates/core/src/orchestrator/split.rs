use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::Dataset;

/// Assignment of samples to the warmup split (0) and the `t` cleaning splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub iterations: u32,
    pub seed: u64,
    /// Split index of every sample.
    pub assignment: Vec<u32>,
}

impl SplitPlan {
    pub fn num_splits(&self) -> usize {
        self.iterations as usize + 1
    }

    /// Sample ids of `split`, ascending.
    pub fn members(&self, split: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(s, k)| (*k as usize == split).then_some(s))
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_splits()];
        for k in &self.assignment {
            sizes[*k as usize] += 1;
        }
        sizes
    }
}

/// Seeded partition of the samples into `iterations + 1` near-equal splits.
///
/// A seeded shuffle orders the samples; the first `N mod (T+1)` splits take
/// `ceil(N/(T+1))` consecutive samples of that order and the rest take the floor.
pub fn split_dataset(dataset: &Dataset, iterations: u32, seed: u64) -> Result<SplitPlan> {
    if iterations < 1 {
        return Err(Error::invalid("at least one cleaning iteration is required"));
    }
    let n = dataset.num_samples();
    let parts = iterations as usize + 1;
    if n < parts {
        return Err(Error::invalid(format!(
            "{n} samples cannot fill {parts} splits (need N >= T+1)"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / parts;
    let extra = n % parts;
    let mut assignment = vec![0u32; n];
    let mut cursor = 0;
    for split in 0..parts {
        let size = base + usize::from(split < extra);
        for &s in &order[cursor..cursor + size] {
            assignment[s] = split as u32;
        }
        cursor += size;
    }
    Ok(SplitPlan {
        iterations,
        seed,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(n: usize) -> Dataset {
        Dataset::from_samples(3, (0..n).map(|i| vec![(i as u32 % 3, true)])).unwrap()
    }

    #[test]
    fn sizes_follow_remainder_rule() {
        assert_eq!(split_dataset(&corpus(10), 4, 1).unwrap().sizes(), vec![2; 5]);
        assert_eq!(split_dataset(&corpus(11), 4, 1).unwrap().sizes(), vec![3, 2, 2, 2, 2]);
        assert_eq!(split_dataset(&corpus(13), 3, 1).unwrap().sizes(), vec![4, 3, 3, 3]);
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let d = corpus(40);
        assert_eq!(split_dataset(&d, 4, 5).unwrap(), split_dataset(&d, 4, 5).unwrap());
        assert_ne!(split_dataset(&d, 4, 5).unwrap(), split_dataset(&d, 4, 6).unwrap());
    }

    #[test]
    fn rejects_too_few_samples() {
        assert!(split_dataset(&corpus(4), 4, 0).is_err());
        assert!(split_dataset(&corpus(4), 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn partitions_all_samples(n in 2usize..200, t in 1u32..8, seed in any::<u64>()) {
            prop_assume!(n > t as usize);
            let plan = split_dataset(&corpus(n), t, seed).unwrap();
            let mut all: Vec<usize> = (0..plan.num_splits()).flat_map(|k| plan.members(k)).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let sizes = plan.sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
