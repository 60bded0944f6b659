//! Count-based n-gram language model with additive smoothing.
//!
//! Small and exactly reproducible: losses, fine-tuning and evaluation are
//! closed-form functions of integer-weighted counts, which lets the cleaning
//! pipeline run end to end without an external trainer.
//!
//! Fine-tuning adds `weight ×` the counts of the selected tokens. This is the
//! count-model stand-in for one pass of gradient training on the masked loss.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::records::{align_mask, Dataset, LossLog, TokenMask};
use crate::scoring::{masked_sft_loss, Normalization};
use crate::wire::{self, ByteReader, CountingWriter, HashSink};

pub const MODEL_MAGIC: [u8; 4] = *b"TKNG";
pub const MODEL_VERSION: u32 = 1;
/// Padding symbol for positions before the start of a sample.
pub const BOS: u32 = u32::MAX;

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    total: f64,
    tokens: BTreeMap<u32, f64>,
}

#[derive(Debug, Clone)]
pub struct CountModel {
    order: u32,
    alpha: f64,
    vocab_size: u32,
    counts: BTreeMap<Vec<u32>, ContextCounts>,
    id: OnceLock<String>,
}

impl PartialEq for CountModel {
    fn eq(&self, other: &Self) -> bool {
        self.order == other.order
            && self.alpha.to_bits() == other.alpha.to_bits()
            && self.vocab_size == other.vocab_size
            && self.counts == other.counts
    }
}

/// Which held-out tokens an evaluation averages over.
#[derive(Debug, Clone, Copy)]
pub enum EvalLabels<'a> {
    AllResponse,
    Mask(&'a TokenMask),
}

impl CountModel {
    /// A model with no counts: every conditional is uniform.
    pub fn empty(order: u32, alpha: f64, vocab_size: u32) -> Result<Self> {
        if order < 1 {
            return Err(Error::invalid("order must be at least 1"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha {alpha} must be positive and finite")));
        }
        if vocab_size == 0 || vocab_size == BOS {
            return Err(Error::invalid(format!("unsupported vocab_size {vocab_size}")));
        }
        Ok(Self {
            order,
            alpha,
            vocab_size,
            counts: BTreeMap::new(),
            id: OnceLock::new(),
        })
    }

    /// Counts every token of `corpus`, prompt and response alike.
    pub fn train_counts(corpus: &Dataset, order: u32, alpha: f64) -> Result<Self> {
        if corpus.total_tokens() == 0 {
            return Err(Error::invalid("cannot train on an empty corpus"));
        }
        Self::empty(order, alpha, corpus.vocab_size())?.add_corpus(corpus, 1.0)
    }

    /// New model with `weight ×` the counts of every token of `corpus` added.
    pub fn add_corpus(&self, corpus: &Dataset, weight: f64) -> Result<Self> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::invalid(format!("weight {weight} must be positive and finite")));
        }
        if corpus.vocab_size() > self.vocab_size {
            return Err(Error::invalid("corpus vocabulary exceeds model vocabulary"));
        }
        let mut out = self.clone();
        out.id = OnceLock::new();
        out.accumulate(corpus, |_| true, weight);
        Ok(out)
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    /// Number of distinct contexts with at least one count.
    pub fn context_count(&self) -> usize {
        self.counts.len()
    }

    /// `"ng-"` followed by the hex digest of the canonical TKNG encoding.
    pub fn model_id(&self) -> &str {
        self.id.get_or_init(|| {
            let mut sink = HashSink::new();
            self.write_to(&mut sink).expect("hashing never fails");
            format!("ng-{:016x}", sink.finish())
        })
    }

    pub fn count(&self, context: &[u32], token: u32) -> f64 {
        self.counts
            .get(context)
            .and_then(|c| c.tokens.get(&token))
            .copied()
            .unwrap_or(0.0)
    }

    /// Smoothed conditional probability `P(token | context)`.
    pub fn prob(&self, context: &[u32], token: u32) -> f64 {
        let (count, total) = match self.counts.get(context) {
            Some(c) => (c.tokens.get(&token).copied().unwrap_or(0.0), c.total),
            None => (0.0, 0.0),
        };
        (count + self.alpha) / (total + self.alpha * self.vocab_size as f64)
    }

    /// Context of position `j` in `tokens`, padded with [`BOS`].
    pub fn context_of(&self, tokens: &[u32], j: usize) -> Vec<u32> {
        let width = (self.order - 1) as usize;
        let mut ctx = Vec::with_capacity(width);
        for back in (1..=width).rev() {
            ctx.push(if j >= back { tokens[j - back] } else { BOS });
        }
        ctx
    }

    /// Per-token negative log-likelihoods in record order, in 64-bit.
    pub fn losses(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        if dataset.vocab_size() > self.vocab_size {
            return Err(Error::invalid(format!(
                "dataset vocab_size {} exceeds model vocab_size {}",
                dataset.vocab_size(),
                self.vocab_size
            )));
        }
        let per_sample: Vec<Vec<f64>> = dataset
            .samples()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|s| {
                (0..s.tokens.len())
                    .map(|j| -self.prob(&self.context_of(s.tokens, j), s.tokens[j]).ln())
                    .collect()
            })
            .collect();
        Ok(per_sample.concat())
    }

    /// Loss log bound to `dataset`, attributed to this model.
    pub fn token_losses(&self, dataset: &Dataset) -> Result<LossLog> {
        LossLog::from_f64(self.model_id(), dataset.digest(), &self.losses(dataset)?)
    }

    /// New model with `weight ×` the counts of every token selected by `mask` added.
    pub fn finetune_on_mask(&self, dataset: &Dataset, mask: &TokenMask, weight: f64) -> Result<Self> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::invalid(format!("weight {weight} must be positive and finite")));
        }
        if dataset.vocab_size() > self.vocab_size {
            return Err(Error::invalid("dataset vocabulary exceeds model vocabulary"));
        }
        align_mask(mask, dataset)?;
        let labels = mask.labels();
        let mut out = self.clone();
        out.id = OnceLock::new();
        out.accumulate(dataset, |i| labels[i], weight);
        Ok(out)
    }

    fn accumulate(&mut self, dataset: &Dataset, include: impl Fn(usize) -> bool, weight: f64) {
        for s in 0..dataset.num_samples() {
            let range = dataset.sample_range(s);
            let start = range.start;
            let tokens = &dataset.tokens()[range.clone()];
            for i in range {
                if include(i) {
                    let ctx = self.context_of(tokens, i - start);
                    let entry = self.counts.entry(ctx).or_default();
                    *entry.tokens.entry(dataset.tokens()[i]).or_insert(0.0) += weight;
                }
            }
        }
        // totals are summed in token order so a reloaded snapshot matches bit for bit
        for c in self.counts.values_mut() {
            c.total = c.tokens.values().sum();
        }
    }

    /// Mean loss (global normalization) over the chosen held-out tokens.
    pub fn heldout_eval(&self, heldout: &Dataset, labels: EvalLabels<'_>) -> Result<f64> {
        let losses = self.losses(heldout)?;
        let y = match labels {
            EvalLabels::AllResponse => heldout.response_labels(),
            EvalLabels::Mask(m) => {
                align_mask(m, heldout)?;
                m.labels()
            }
        };
        masked_sft_loss(&losses, y, &heldout.sample_lengths(), Normalization::Global)
    }

    pub fn write_to<W: Write>(&self, sink: W) -> Result<u64> {
        let mut w = CountingWriter::new(sink);
        w.put(&MODEL_MAGIC)?;
        w.u32(MODEL_VERSION)?;
        w.u32(self.order)?;
        w.f64(self.alpha)?;
        w.u32(self.vocab_size)?;
        let entries: u64 = self.counts.values().map(|c| c.tokens.len() as u64).sum();
        w.u64(entries)?;
        for (ctx, c) in &self.counts {
            for (tok, n) in &c.tokens {
                for t in ctx {
                    w.u32(*t)?;
                }
                w.u32(*tok)?;
                w.f64(*n)?;
            }
        }
        Ok(w.count())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec never fails");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("TKNG", bytes);
        r.magic(MODEL_MAGIC)?;
        r.version(MODEL_VERSION)?;
        let order = r.u32("order")?;
        let alpha = r.f64("alpha")?;
        let vocab_size = r.u32("vocab_size")?;
        let mut model = Self::empty(order, alpha, vocab_size).map_err(|e| r.malformed(e.to_string()))?;
        let count = r.u64("entry_count")?;
        let width = order as usize - 1;
        let count = r.expect_room(count, 4 * (width + 1) + 8, "count entries")?;
        let mut prev: Option<(Vec<u32>, u32)> = None;
        for _ in 0..count {
            let at = r.offset();
            let mut ctx = Vec::with_capacity(width);
            for _ in 0..width {
                ctx.push(r.u32("context token")?);
            }
            let tok = r.u32("token")?;
            let n = r.f64("count")?;
            if ctx.iter().any(|t| *t != BOS && *t >= vocab_size) || tok >= vocab_size {
                return Err(r.malformed_at(at, "token outside vocabulary"));
            }
            if !(n > 0.0 && n.is_finite()) {
                return Err(r.malformed_at(at, format!("count {n} must be positive and finite")));
            }
            let key = (ctx, tok);
            if prev.as_ref().is_some_and(|p| *p >= key) {
                return Err(r.malformed_at(at, "entries out of canonical order"));
            }
            let entry = model.counts.entry(key.0.clone()).or_default();
            entry.total += n;
            entry.tokens.insert(tok, n);
            prev = Some(key);
        }
        r.finish()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        wire::write_atomic(path, &self.to_bytes())
    }
}
