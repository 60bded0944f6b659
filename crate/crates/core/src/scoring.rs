//! Token scores from paired loss logs, and the masked fine-tuning loss.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::{align_loss_log, Dataset, LossLog};
use crate::wire::{self, ByteReader, CountingWriter};

pub const SCORE_MAGIC: [u8; 4] = *b"TKSC";
pub const SCORE_VERSION: u32 = 1;
const ENTRY_BYTES: usize = 8 + 4 + 8;

/// Raw influence of the update base → reference on one token: `ref_loss - base_loss`.
///
/// Negative values mean the reference model is more confident than the base.
pub fn token_influence(base_loss: f64, ref_loss: f64) -> Result<f64> {
    check_finite(base_loss)?;
    check_finite(ref_loss)?;
    Ok(ref_loss - base_loss)
}

/// Token quality score, `base_loss - ref_loss`. Higher is better.
pub fn token_score(base_loss: f64, ref_loss: f64) -> Result<f64> {
    check_finite(base_loss)?;
    check_finite(ref_loss)?;
    Ok(base_loss - ref_loss)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("loss {v} is not finite")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreEntry {
    pub sample_id: u64,
    pub position: u32,
    pub score: f64,
}

/// One score per response token, in record order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub entries: Vec<ScoreEntry>,
    pub base_model_id: String,
    pub ref_model_id: String,
    pub dataset_digest: u64,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    /// Checks that entry `i` is the `i`-th response token of `dataset`.
    ///
    /// Returns the flat record index of every entry.
    pub fn check_against(&self, dataset: &Dataset) -> Result<Vec<usize>> {
        if self.dataset_digest != dataset.digest() {
            return Err(Error::DigestMismatch {
                what: "score table".into(),
                expected: dataset.digest(),
                found: self.dataset_digest,
            });
        }
        let eligible = eligible_indices(dataset);
        if eligible.len() != self.entries.len() {
            return Err(Error::LengthMismatch {
                what: "score entries",
                expected: eligible.len(),
                found: self.entries.len(),
            });
        }
        for (e, &flat) in self.entries.iter().zip(&eligible) {
            if dataset.flat_index(e.sample_id, e.position) != Some(flat) {
                return Err(Error::invalid(format!(
                    "score entry ({}, {}) is out of record order",
                    e.sample_id, e.position
                )));
            }
        }
        Ok(eligible)
    }

    pub fn write_to<W: Write>(&self, sink: W) -> Result<u64> {
        let mut w = CountingWriter::new(sink);
        w.put(&SCORE_MAGIC)?;
        w.u32(SCORE_VERSION)?;
        w.u64(self.dataset_digest)?;
        w.short_str(&self.base_model_id)?;
        w.short_str(&self.ref_model_id)?;
        w.u64(self.entries.len() as u64)?;
        for e in &self.entries {
            w.u64(e.sample_id)?;
            w.u32(e.position)?;
            w.f64(e.score)?;
        }
        Ok(w.count())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + ENTRY_BYTES * self.entries.len());
        self.write_to(&mut out).expect("writing to a Vec never fails");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("TKSC", bytes);
        r.magic(SCORE_MAGIC)?;
        r.version(SCORE_VERSION)?;
        let dataset_digest = r.u64("dataset_digest")?;
        let base_model_id = r.short_str("base_model_id")?;
        let ref_model_id = r.short_str("ref_model_id")?;
        let count = r.u64("entry_count")?;
        let count = r.expect_room(count, ENTRY_BYTES, "score entries")?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.offset();
            let e = ScoreEntry {
                sample_id: r.u64("sample_id")?,
                position: r.u32("position")?,
                score: r.f64("score")?,
            };
            if !e.score.is_finite() {
                return Err(r.malformed_at(at, "non-finite score"));
            }
            entries.push(e);
        }
        r.finish()?;
        Ok(Self {
            entries,
            base_model_id,
            ref_model_id,
            dataset_digest,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        wire::write_atomic(path, &self.to_bytes())
    }
}

/// Flat record indices of all response tokens.
pub fn eligible_indices(dataset: &Dataset) -> Vec<usize> {
    dataset
        .response_labels()
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.then_some(i))
        .collect()
}

/// Scores every response token of `dataset` with `base_log` as θ and `ref_log` as θ′.
pub fn score_dataset(dataset: &Dataset, base_log: &LossLog, ref_log: &LossLog) -> Result<ScoreTable> {
    align_loss_log(base_log, dataset)?;
    align_loss_log(ref_log, dataset)?;
    let base = base_log.entries();
    let reference = ref_log.entries();
    let response = dataset.response_labels();
    let per_sample: Vec<Vec<ScoreEntry>> = (0..dataset.num_samples())
        .into_par_iter()
        .map(|s| {
            let range = dataset.sample_range(s);
            let start = range.start;
            range
                .filter(|&i| response[i])
                .map(|i| ScoreEntry {
                    sample_id: s as u64,
                    position: (i - start) as u32,
                    score: base[i] as f64 - reference[i] as f64,
                })
                .collect()
        })
        .collect();
    Ok(ScoreTable {
        entries: per_sample.concat(),
        base_model_id: base_log.model_id().to_string(),
        ref_model_id: ref_log.model_id().to_string(),
        dataset_digest: dataset.digest(),
    })
}

/// How the masked loss averages over selected tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Sum over selected tokens divided by their count.
    #[default]
    Global,
    /// Mean over samples of each sample's selected-token mean.
    PerSample,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Global => "global",
            Normalization::PerSample => "per-sample",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Normalization::Global),
            "per-sample" => Ok(Normalization::PerSample),
            _ => Err(Error::invalid(format!("unknown normalization {s:?}"))),
        }
    }
}

/// Masked next-token loss over `labels`.
///
/// `sample_lengths` partitions the token sequence into samples; it only matters
/// for [`Normalization::PerSample`]. Samples without positive labels are skipped.
pub fn masked_sft_loss(
    losses: &[f64],
    labels: &[bool],
    sample_lengths: &[usize],
    normalization: Normalization,
) -> Result<f64> {
    if losses.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "loss labels",
            expected: losses.len(),
            found: labels.len(),
        });
    }
    match normalization {
        Normalization::Global => {
            let (sum, n) = masked_sum(losses, labels);
            if n == 0 {
                return Err(Error::UndefinedLoss);
            }
            Ok(sum / n as f64)
        }
        Normalization::PerSample => {
            let total: usize = sample_lengths.iter().sum();
            if total != losses.len() {
                return Err(Error::LengthMismatch {
                    what: "sample lengths total",
                    expected: losses.len(),
                    found: total,
                });
            }
            let mut start = 0;
            let mut acc = 0.0;
            let mut contributing = 0usize;
            for &len in sample_lengths {
                let (sum, n) = masked_sum(&losses[start..start + len], &labels[start..start + len]);
                if n > 0 {
                    acc += sum / n as f64;
                    contributing += 1;
                }
                start += len;
            }
            if contributing == 0 {
                return Err(Error::UndefinedLoss);
            }
            Ok(acc / contributing as f64)
        }
    }
}

fn masked_sum(losses: &[f64], labels: &[bool]) -> (f64, usize) {
    losses
        .iter()
        .zip(labels)
        .filter(|(_, y)| **y)
        .fold((0.0, 0), |(s, n), (l, _)| (s + l, n + 1))
}
