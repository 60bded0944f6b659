//! Exact top-n under the order (score desc, index asc).
//!
//! The top-n set is fully described by its last member, so every exact
//! routine here reduces to finding that [`Cutoff`].

use std::cmp::Ordering;

use rayon::prelude::*;

use super::sketch::QuantileSketch;
use crate::error::{Error, Result};

/// Inputs at least this long are partitioned across threads.
const PARALLEL_MIN: usize = 1 << 16;

/// The n-th ranked item: everything ranked at or before it is selected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cutoff {
    pub score: f64,
    pub index: usize,
}

impl Cutoff {
    pub fn admits(&self, score: f64, index: usize) -> bool {
        rank_cmp((score, index), (self.score, self.index)) != Ordering::Greater
    }
}

/// Ordering of `(score, index)` keys: higher score first, then lower index.
/// Scores compare numerically, so `-0.0` and `0.0` tie and fall back to index.
pub fn rank_cmp(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .expect("scores are finite")
        .then(a.1.cmp(&b.1))
}

/// Cutoff of the top `n` of `scores` (1 ≤ n ≤ len).
pub fn nth_cutoff(scores: &[f64], n: usize) -> Result<Cutoff> {
    if n == 0 || n > scores.len() {
        return Err(Error::invalid(format!("cannot take top {n} of {} scores", scores.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("score at index {i} is not finite")));
    }
    let mut keys = if scores.len() >= PARALLEL_MIN {
        partition_candidates(scores, n)
    } else {
        scores.iter().copied().zip(0..).collect()
    };
    Ok(nth_of(&mut keys, n))
}

fn nth_of(keys: &mut [(f64, usize)], n: usize) -> Cutoff {
    let (_, nth, _) = keys.select_nth_unstable_by(n - 1, |a, b| rank_cmp(*a, *b));
    Cutoff {
        score: nth.0,
        index: nth.1,
    }
}

/// Per-partition top-n candidates; their union contains the global top-n.
fn partition_candidates(scores: &[f64], n: usize) -> Vec<(f64, usize)> {
    let parts = rayon::current_num_threads().max(1) * 2;
    let chunk = scores.len().div_ceil(parts);
    scores
        .par_chunks(chunk)
        .enumerate()
        .flat_map_iter(|(c, slice)| {
            let base = c * chunk;
            let mut keys: Vec<(f64, usize)> = slice.iter().copied().zip(base..).collect();
            if keys.len() > n {
                keys.select_nth_unstable_by(n - 1, |a, b| rank_cmp(*a, *b));
                keys.truncate(n);
            }
            keys
        })
        .collect()
}

/// Selection flags for the top `n` of `scores`.
pub fn top_n_flags(scores: &[f64], n: usize) -> Result<Vec<bool>> {
    let cut = nth_cutoff(scores, n)?;
    Ok(scores.iter().enumerate().map(|(i, s)| cut.admits(*s, i)).collect())
}

/// Exact cutoff over a score source too large to hold, read twice.
///
/// Pass one builds a rank sketch and brackets the n-th score between two
/// retained values using the sketch's error bound. Pass two counts scores
/// above the bracket and keeps only the (small) band inside it, where the
/// exact n-th key is then found in memory.
pub fn two_pass_cutoff<I, F>(mut source: F, n: usize, epsilon: f64) -> Result<Cutoff>
where
    F: FnMut() -> Result<I>,
    I: Iterator<Item = Result<f64>>,
{
    let mut len = 0usize;
    let mut sketch = QuantileSketch::with_capacity(super::sketch::capacity_for(epsilon, 1 << 32));
    for s in source()? {
        let s = s?;
        if !s.is_finite() {
            return Err(Error::invalid(format!("score at index {len} is not finite")));
        }
        sketch.insert(s);
        len += 1;
    }
    if n == 0 || n > len {
        return Err(Error::invalid(format!("cannot take top {n} of {len} scores")));
    }
    let slack = sketch.error_bound() + 1;
    let (hi, lo) = bracket(&sketch, n as u64, slack);

    let mut above = 0usize;
    let mut band: Vec<(f64, usize)> = Vec::new();
    for (i, s) in source()?.enumerate() {
        let s = s?;
        if hi.is_some_and(|h| s > h) {
            above += 1;
        } else if lo.is_none_or(|l| s >= l) {
            band.push((s, i));
        }
    }
    if above >= n || above + band.len() < n {
        return Err(Error::invalid("score source changed between passes"));
    }
    Ok(nth_of(&mut band, n - above))
}

/// Values `(hi, lo)` with at most `n` items strictly above `hi` and at least
/// `n` items at or above `lo`; `None` means unbounded on that side.
fn bracket(sketch: &QuantileSketch, n: u64, slack: u64) -> (Option<f64>, Option<f64>) {
    let mut hi = None;
    let mut lo = None;
    let probe = |target: u64| sketch.threshold_for_count(target);
    // strictly-above count ≤ estimate(≥ hi) ≤ true(≥ hi) + err
    if n > slack {
        if let Some(t) = probe(n - slack) {
            if sketch.count_at_least(t) + sketch.error_bound() <= n {
                hi = Some(t);
            }
        }
    }
    if let Some(t) = probe(n + slack) {
        if sketch.count_at_least(t) >= n + sketch.error_bound() {
            lo = Some(t);
        }
    }
    (hi, lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sort_oracle(scores: &[f64], n: usize) -> Vec<bool> {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|a, b| rank_cmp((scores[*a], *a), (scores[*b], *b)));
        let mut out = vec![false; scores.len()];
        for i in &idx[..n] {
            out[*i] = true;
        }
        out
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(top_n_flags(&[0.5; 4], 2).unwrap(), vec![true, true, false, false]);
        assert_eq!(top_n_flags(&[0.0, -0.0, 0.0], 1).unwrap(), vec![true, false, false]);
        assert_eq!(top_n_flags(&[-0.0, 0.0, 0.0], 2).unwrap(), vec![true, true, false]);
    }

    #[test]
    fn rejects_degenerate_counts() {
        assert!(nth_cutoff(&[1.0], 0).is_err());
        assert!(nth_cutoff(&[1.0], 2).is_err());
        assert!(nth_cutoff(&[f64::NAN], 1).is_err());
    }

    #[test]
    fn partitioned_matches_sequential() {
        let scores: Vec<f64> = (0..200_000u64).map(|i| ((i * 7919) % 1013) as f64).collect();
        for n in [1, 17, 50_000, 199_999, 200_000] {
            let flags = top_n_flags(&scores, n).unwrap();
            assert_eq!(flags, sort_oracle(&scores, n), "n={n}");
        }
    }

    #[test]
    fn two_pass_matches_in_memory() {
        let scores: Vec<f64> = (0..150_000u64).map(|i| ((i * 104_729) % 9973) as f64 / 7.0).collect();
        for n in [1, 1000, 75_000, 149_999, 150_000] {
            let src = || Ok(scores.iter().map(|s| Ok(*s)));
            let cut = two_pass_cutoff(src, n, 0.01).unwrap();
            assert_eq!(cut, nth_cutoff(&scores, n).unwrap(), "n={n}");
        }
    }

    proptest! {
        #[test]
        fn flags_match_sort_oracle(
            scores in prop::collection::vec(prop_oneof![(-3i32..3).prop_map(f64::from), -1e3f64..1e3], 1..300),
            frac in 0.0f64..1.0,
        ) {
            let n = ((scores.len() as f64 * frac) as usize).max(1);
            prop_assert_eq!(top_n_flags(&scores, n).unwrap(), sort_oracle(&scores, n));
            let src = || Ok(scores.iter().map(|s| Ok(*s)));
            prop_assert_eq!(two_pass_cutoff(src, n, 0.05).unwrap(), nth_cutoff(&scores, n).unwrap());
        }
    }
}
