//! Mergeable rank sketch with a deterministic, tracked error bound.
//!
//! Items enter level 0 with weight 1. A full level is sorted and halved by
//! keeping every other item (alternating offsets), and the survivors move one
//! level up with doubled weight. Each compaction at weight `w` moves any rank
//! query by at most `w`, and the sketch sums these weights, so the error of
//! every count estimate is known exactly rather than only in expectation.

use crate::error::{Error, Result};

/// Largest ε accepted by the streaming engine.
pub const MAX_EPSILON: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct QuantileSketch {
    capacity: usize,
    levels: Vec<Vec<f64>>,
    // alternates the kept parity per level so compaction errors do not all lean one way
    flips: Vec<bool>,
    count: u64,
    error_bound: u64,
}

impl QuantileSketch {
    /// Sketch sized so a threshold for a stream of `expected_len` items has rank error ≤ ε·len.
    pub fn new(epsilon: f64, expected_len: u64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= MAX_EPSILON) {
            return Err(Error::invalid(format!("epsilon {epsilon} outside (0, {MAX_EPSILON}]")));
        }
        Ok(Self::with_capacity(capacity_for(epsilon, expected_len.max(1))))
    }

    pub fn with_capacity(capacity: usize) -> Self {
        let capacity = capacity.max(4) & !1;
        Self {
            capacity,
            levels: vec![Vec::with_capacity(capacity)],
            flips: vec![false],
            count: 0,
            error_bound: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Upper bound on |estimated − true| for any "count of items ≥ t" query.
    pub fn error_bound(&self) -> u64 {
        self.error_bound
    }

    /// Items currently held, a measure of memory use.
    pub fn retained(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn insert(&mut self, value: f64) {
        self.count += 1;
        self.levels[0].push(value);
        if self.levels[0].len() >= self.capacity {
            self.compact_from(0);
        }
    }

    pub fn extend(&mut self, values: impl IntoIterator<Item = f64>) {
        for v in values {
            self.insert(v);
        }
    }

    /// Folds `other` into `self`; error bounds add.
    pub fn merge(&mut self, other: &QuantileSketch) {
        self.count += other.count;
        self.error_bound += other.error_bound;
        for (h, items) in other.levels.iter().enumerate() {
            self.ensure_level(h);
            self.levels[h].extend_from_slice(items);
        }
        for h in 0..self.levels.len() {
            if self.levels[h].len() >= self.capacity {
                self.compact_from(h);
            }
        }
    }

    fn ensure_level(&mut self, h: usize) {
        while self.levels.len() <= h {
            self.levels.push(Vec::with_capacity(self.capacity));
            self.flips.push(false);
        }
    }

    fn compact_from(&mut self, start: usize) {
        let mut h = start;
        while h < self.levels.len() && self.levels[h].len() >= self.capacity {
            self.ensure_level(h + 1);
            let mut items = std::mem::take(&mut self.levels[h]);
            items.sort_unstable_by(f64::total_cmp);
            // an odd leftover stays behind at this level
            let leftover = if items.len() % 2 == 1 { items.pop() } else { None };
            let offset = usize::from(self.flips[h]);
            self.flips[h] = !self.flips[h];
            let promoted: Vec<f64> = items.iter().skip(offset).step_by(2).copied().collect();
            self.levels[h + 1].extend(promoted);
            self.error_bound += 1u64 << h;
            let mut rest = Vec::with_capacity(self.capacity);
            rest.extend(leftover);
            self.levels[h] = rest;
            h += 1;
        }
    }

    /// Weighted items sorted by value descending.
    fn weighted_desc(&self) -> Vec<(f64, u64)> {
        let mut all: Vec<(f64, u64)> = self
            .levels
            .iter()
            .enumerate()
            .flat_map(|(h, items)| items.iter().map(move |v| (*v, 1u64 << h)))
            .collect();
        all.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
        all
    }

    /// Estimated number of inserted items ≥ `t`.
    pub fn count_at_least(&self, t: f64) -> u64 {
        self.levels
            .iter()
            .enumerate()
            .map(|(h, items)| items.iter().filter(|v| **v >= t).count() as u64 * (1u64 << h))
            .sum()
    }

    /// Retained value whose estimated "count ≥ value" is closest to `n`.
    pub fn threshold_for_count(&self, n: u64) -> Option<f64> {
        let items = self.weighted_desc();
        let mut best: Option<(u64, f64)> = None;
        let mut cum = 0u64;
        let mut i = 0;
        while i < items.len() {
            let v = items[i].0;
            // equal values share one estimate
            while i < items.len() && items[i].0 == v {
                cum += items[i].1;
                i += 1;
            }
            let gap = cum.abs_diff(n);
            if best.is_none_or(|(g, _)| gap < g) {
                best = Some((gap, v));
            }
            if cum >= n {
                break;
            }
        }
        best.map(|(_, v)| v)
    }
}

/// Smallest even capacity `c` with `(levels(c) + 2) / c ≤ ε`, where `levels`
/// bounds the number of compaction levels a stream of `len` items can reach.
pub fn capacity_for(epsilon: f64, len: u64) -> usize {
    let mut cap = ((3.0 / epsilon).ceil() as usize).max(4);
    loop {
        let levels = levels_for(cap, len);
        let need = (((levels + 2) as f64) / epsilon).ceil() as usize;
        if need <= cap {
            return (cap + 1) & !1;
        }
        cap = need;
    }
}

fn levels_for(cap: usize, len: u64) -> u32 {
    let ratio = (len as f64 / cap as f64).max(1.0);
    ratio.log2().ceil() as u32 + 1
}

/// Threshold `t` such that the number of scores ≥ `t` is within `ε·M` of
/// `floor(k/100 · M)`, computed in one pass with memory independent of `M`
/// (up to a logarithmic factor).
pub fn streaming_threshold(scores: &[f64], k_percent: f64, epsilon: f64) -> Result<f64> {
    super::check_k(k_percent)?;
    if scores.is_empty() {
        return Err(Error::invalid("empty score stream"));
    }
    let mut sketch = QuantileSketch::new(epsilon, scores.len() as u64)?;
    sketch.extend(scores.iter().copied());
    let n = super::select_count(k_percent, scores.len()) as u64;
    sketch
        .threshold_for_count(n.max(1))
        .ok_or_else(|| Error::invalid("empty score stream"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exact_count(scores: &[f64], t: f64) -> usize {
        scores.iter().filter(|s| **s >= t).count()
    }

    #[test]
    fn rejects_bad_epsilon() {
        for eps in [0.0, -0.1, 0.051, f64::NAN] {
            assert!(streaming_threshold(&[1.0], 50.0, eps).is_err());
        }
        assert!(streaming_threshold(&[1.0], 50.0, 0.05).is_ok());
    }

    #[test]
    fn permutation_threshold_near_900() {
        let mut v: Vec<f64> = (0..1000).map(f64::from).collect();
        v.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
        let t = streaming_threshold(&v, 10.0, 0.001).unwrap();
        assert!((t - 900.0).abs() <= 1.0, "{t}");
    }

    #[test]
    fn constant_stream_selects_all() {
        let v = vec![0.25; 50_000];
        let t = streaming_threshold(&v, 30.0, 0.01).unwrap();
        assert_eq!(t, 0.25);
        assert_eq!(exact_count(&v, t), v.len());
    }

    #[test]
    fn merge_matches_error_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut v: Vec<f64> = (0..200_000).map(|i| (i as f64).sin() * 1e3).collect();
        v.shuffle(&mut rng);
        let cap = capacity_for(0.01, v.len() as u64);
        let mut shards: Vec<QuantileSketch> = v
            .chunks(30_001)
            .map(|c| {
                let mut s = QuantileSketch::with_capacity(cap);
                s.extend(c.iter().copied());
                s
            })
            .collect();
        let mut merged = shards.remove(0);
        for s in &shards {
            merged.merge(s);
        }
        assert_eq!(merged.count(), v.len() as u64);
        for t in [-900.0, -10.0, 0.0, 400.0, 999.0] {
            let est = merged.count_at_least(t) as i64;
            let truth = exact_count(&v, t) as i64;
            assert!((est - truth).unsigned_abs() <= merged.error_bound(), "t={t} est={est} truth={truth}");
        }
    }

    #[test]
    fn capacity_grows_logarithmically() {
        let a = capacity_for(0.001, 1_000_000);
        let b = capacity_for(0.001, 1_000_000_000);
        assert!(b > a);
        assert!(b < 2 * a);
    }
}
