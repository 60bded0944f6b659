use std::io::Write;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::wire::{self, ByteReader, CountingWriter};

pub const LOSS_MAGIC: [u8; 4] = *b"TKLL";
pub const LOSS_VERSION: u32 = 1;

/// Per-token losses of one model over one record file, in record order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossLog {
    model_id: String,
    dataset_digest: u64,
    entries: Vec<f32>,
}

impl LossLog {
    /// Rejects NaN, infinite and negative entries.
    pub fn new(model_id: impl Into<String>, dataset_digest: u64, entries: Vec<f32>) -> Result<Self> {
        let model_id = model_id.into();
        if model_id.len() > u16::MAX as usize {
            return Err(Error::invalid("model_id longer than 65535 bytes"));
        }
        if let Some((index, v)) = entries
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidLoss {
                index,
                value: *v as f64,
            });
        }
        Ok(Self {
            model_id,
            dataset_digest,
            entries,
        })
    }

    /// Quantizes 64-bit losses to the stored 32-bit representation.
    pub fn from_f64(model_id: impl Into<String>, dataset_digest: u64, losses: &[f64]) -> Result<Self> {
        if let Some((index, v)) = losses.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidLoss { index, value: *v });
        }
        Self::new(model_id, dataset_digest, losses.iter().map(|v| *v as f32).collect())
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn dataset_digest(&self) -> u64 {
        self.dataset_digest
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to<W: Write>(&self, sink: W) -> Result<u64> {
        let mut w = CountingWriter::new(sink);
        w.put(&LOSS_MAGIC)?;
        w.u32(LOSS_VERSION)?;
        w.short_str(&self.model_id)?;
        w.u64(self.dataset_digest)?;
        w.u64(self.entries.len() as u64)?;
        for v in &self.entries {
            w.f32(*v)?;
        }
        Ok(w.count())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.model_id.len() + 4 * self.entries.len());
        self.write_to(&mut out).expect("writing to a Vec never fails");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("TKLL", bytes);
        r.magic(LOSS_MAGIC)?;
        r.version(LOSS_VERSION)?;
        let model_id = r.short_str("model_id")?;
        let dataset_digest = r.u64("dataset_digest")?;
        let count = r.u64("entry_count")?;
        let count = r.expect_room(count, 4, "loss entries")?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            entries.push(r.f32("loss")?);
        }
        r.finish()?;
        Self::new(model_id, dataset_digest, entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        wire::write_atomic(path, &self.to_bytes())
    }
}

/// Evidence that a loss log lines up token-for-token with a dataset.
#[derive(Debug, Clone, Copy)]
pub struct AlignedLog<'a> {
    log: &'a LossLog,
    dataset: &'a Dataset,
}

impl<'a> AlignedLog<'a> {
    pub fn log(&self) -> &'a LossLog {
        self.log
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    /// Loss of `(sample_id, position)`, widened to 64 bits.
    pub fn get(&self, sample_id: u64, position: u32) -> Option<f64> {
        self.dataset
            .flat_index(sample_id, position)
            .map(|i| self.log.entries[i] as f64)
    }
}

/// Succeeds iff the log has one entry per token and carries the dataset's digest.
pub fn align_loss_log<'a>(log: &'a LossLog, dataset: &'a Dataset) -> Result<AlignedLog<'a>> {
    if log.len() != dataset.total_tokens() {
        return Err(Error::LengthMismatch {
            what: "loss log entries",
            expected: dataset.total_tokens(),
            found: log.len(),
        });
    }
    if log.dataset_digest != dataset.digest() {
        return Err(Error::DigestMismatch {
            what: format!("loss log of model {}", log.model_id),
            expected: dataset.digest(),
            found: log.dataset_digest,
        });
    }
    Ok(AlignedLog { log, dataset })
}
