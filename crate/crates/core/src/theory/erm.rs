use super::task::{Hypothesis, NoisyDataset};
use crate::error::{Error, Result};

/// Largest hypothesis class enumerated.
pub const MAX_HYPOTHESES: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub enum HypothesisSpace {
    /// Every table context → token, enumerated lexicographically (context 0 most significant).
    AllTables,
    /// An explicit list, searched in order.
    List(Vec<Hypothesis>),
}

/// Token counts per (context, token) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CountTable {
    pub contexts: u32,
    pub tokens: u32,
    counts: Vec<u64>,
    total: u64,
}

impl CountTable {
    pub fn new(contexts: u32, tokens: u32) -> Self {
        Self {
            contexts,
            tokens,
            counts: vec![0; contexts as usize * tokens as usize],
            total: 0,
        }
    }

    pub fn from_dataset(data: &NoisyDataset) -> Self {
        let mut t = Self::new(data.contexts, data.tokens);
        t.add_dataset(data);
        t
    }

    pub fn add_dataset(&mut self, data: &NoisyDataset) {
        for item in &data.items {
            self.add(item.context, item.token);
        }
    }

    pub fn add(&mut self, context: u32, token: u32) {
        self.counts[(context * self.tokens + token) as usize] += 1;
        self.total += 1;
    }

    pub fn get(&self, context: u32, token: u32) -> u64 {
        self.counts[(context * self.tokens + token) as usize]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Number of tokens `h` gets wrong.
    pub fn loss(&self, h: &Hypothesis) -> u64 {
        self.total - (0..self.contexts).map(|c| self.get(c, h.table[c as usize])).sum::<u64>()
    }
}

/// Empirical 0-1 minimizer over every token of `data`.
pub fn erm_train(data: &NoisyDataset, space: &HypothesisSpace) -> Result<Hypothesis> {
    if data.items.is_empty() {
        return Err(Error::invalid("empirical risk minimization needs at least one token"));
    }
    erm_counts(&CountTable::from_dataset(data), space)
}

/// As [`erm_train`] but from counts; with no tokens every hypothesis ties and the first wins.
pub fn erm_counts(counts: &CountTable, space: &HypothesisSpace) -> Result<Hypothesis> {
    match space {
        HypothesisSpace::List(list) => {
            let mut best: Option<(u64, &Hypothesis)> = None;
            for h in list {
                if h.table.len() != counts.contexts as usize || h.table.iter().any(|t| *t >= counts.tokens) {
                    return Err(Error::invalid("hypothesis does not cover the context space"));
                }
                let loss = counts.loss(h);
                if best.is_none_or(|(b, _)| loss < b) {
                    best = Some((loss, h));
                }
            }
            best.map(|(_, h)| h.clone())
                .ok_or_else(|| Error::invalid("empty hypothesis list"))
        }
        HypothesisSpace::AllTables => enumerate_tables(counts),
    }
}

/// Odometer walk over all tables, updating the hit count digit by digit.
fn enumerate_tables(counts: &CountTable) -> Result<Hypothesis> {
    let (c, v) = (counts.contexts as usize, counts.tokens);
    let size = (v as u64).checked_pow(c as u32).filter(|s| *s <= MAX_HYPOTHESES);
    if size.is_none() {
        return Err(Error::invalid(format!(
            "{v}^{c} tables exceed the enumeration limit of {MAX_HYPOTHESES}"
        )));
    }
    let mut table = vec![0u32; c];
    let mut hits: u64 = (0..c).map(|i| counts.get(i as u32, 0)).sum();
    let mut best_hits = hits;
    let mut best = table.clone();
    loop {
        // increment the least significant digit, carrying leftwards
        let mut i = c;
        loop {
            if i == 0 {
                return Ok(Hypothesis { table: best });
            }
            i -= 1;
            let ctx = i as u32;
            let old = table[i];
            hits -= counts.get(ctx, old);
            if old + 1 < v {
                table[i] = old + 1;
                hits += counts.get(ctx, old + 1);
                break;
            }
            table[i] = 0;
            hits += counts.get(ctx, 0);
        }
        // strictly fewer errors: ties keep the earlier table
        if hits > best_hits {
            best_hits = hits;
            best.copy_from_slice(&table);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::theory::task::LabeledToken;
    use proptest::prelude::*;

    fn dataset(contexts: u32, tokens: u32, pairs: &[(u32, u32)]) -> NoisyDataset {
        NoisyDataset {
            contexts,
            tokens,
            items: pairs
                .iter()
                .map(|&(context, token)| LabeledToken { context, token, clean: true })
                .collect(),
        }
    }

    #[test]
    fn identity_beats_constants_and_flip() {
        let ctx = [0, 0, 0, 0, 1, 1, 1, 1];
        let tok = [0, 0, 0, 1, 1, 1, 1, 0];
        let pairs: Vec<_> = ctx.into_iter().zip(tok).collect();
        let d = dataset(2, 2, &pairs);
        let h = erm_train(&d, &HypothesisSpace::AllTables).unwrap();
        assert_eq!(h.table, vec![0, 1]);
        let c = CountTable::from_dataset(&d);
        let losses: Vec<u64> = [[0, 0], [0, 1], [1, 0], [1, 1]]
            .iter()
            .map(|t| c.loss(&Hypothesis { table: t.to_vec() }))
            .collect();
        assert_eq!(losses, vec![4, 2, 6, 4]);
    }

    #[test]
    fn ties_go_to_the_lexicographically_first_table() {
        let d = dataset(2, 3, &[(0, 2), (0, 1), (1, 0)]);
        assert_eq!(erm_train(&d, &HypothesisSpace::AllTables).unwrap().table, vec![1, 0]);
        let list = vec![Hypothesis { table: vec![2, 0] }, Hypothesis { table: vec![1, 0] }];
        assert_eq!(erm_train(&d, &HypothesisSpace::List(list)).unwrap().table, vec![2, 0]);
        assert_eq!(
            erm_counts(&CountTable::new(3, 2), &HypothesisSpace::AllTables).unwrap().table,
            vec![0, 0, 0]
        );
    }

    #[test]
    fn rejects_empty_data_and_huge_spaces() {
        assert!(erm_train(&dataset(2, 2, &[]), &HypothesisSpace::AllTables).is_err());
        assert!(erm_train(&dataset(21, 2, &[(0, 0)]), &HypothesisSpace::AllTables).is_err());
        assert!(erm_train(&dataset(20, 2, &[(0, 1)]), &HypothesisSpace::AllTables).is_ok());
    }

    proptest! {
        #[test]
        fn minimizer_is_minimal_and_first(
            contexts in 1u32..5,
            tokens in 2u32..4,
            raw in proptest::collection::vec((0u32..100, 0u32..100), 0..40),
        ) {
            let pairs: Vec<_> = raw.iter().map(|(c, t)| (c % contexts, t % tokens)).collect();
            let d = dataset(contexts, tokens, &pairs);
            let counts = CountTable::from_dataset(&d);
            let h = erm_counts(&counts, &HypothesisSpace::AllTables).unwrap();
            // re-scan every table by plain base-`tokens` counting
            let total = (tokens as u64).pow(contexts);
            let mut first_best: Option<(u64, Vec<u32>)> = None;
            for code in 0..total {
                let mut t = vec![0u32; contexts as usize];
                let mut rest = code;
                for i in (0..contexts as usize).rev() {
                    t[i] = (rest % tokens as u64) as u32;
                    rest /= tokens as u64;
                }
                let loss = counts.loss(&Hypothesis { table: t.clone() });
                prop_assert!(counts.loss(&h) <= loss);
                if first_best.as_ref().is_none_or(|(b, _)| loss < *b) {
                    first_best = Some((loss, t));
                }
            }
            prop_assert_eq!(h.table, first_best.unwrap().1);
        }
    }
}
