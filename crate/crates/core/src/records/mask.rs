use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::wire::{self, ByteReader, CountingWriter};

pub const MASK_MAGIC: [u8; 4] = *b"TKMK";
pub const MASK_VERSION: u32 = 1;

/// Where a mask came from. Serialized as JSON into the mask file's provenance blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_percent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engine: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub model_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Provenance {
    pub fn new(mode: impl Into<String>) -> Self {
        Self {
            mode: mode.into(),
            ..Self::default()
        }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("provenance serializes")
    }
}

/// Cleaned token labels ŷ, one bit per token in record order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMask {
    labels: Vec<bool>,
    provenance: String,
    dataset_digest: u64,
}

impl TokenMask {
    pub fn new(labels: Vec<bool>, provenance: &Provenance, dataset_digest: u64) -> Self {
        Self {
            labels,
            provenance: provenance.to_text(),
            dataset_digest,
        }
    }

    /// Keeps the provenance blob verbatim.
    pub fn with_raw_provenance(labels: Vec<bool>, provenance: String, dataset_digest: u64) -> Self {
        Self {
            labels,
            provenance,
            dataset_digest,
        }
    }

    /// ŷ = ỹ: every response token selected.
    pub fn all_response(dataset: &Dataset, provenance: &Provenance) -> Self {
        Self::new(dataset.response_labels().to_vec(), provenance, dataset.digest())
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn selected_count(&self) -> usize {
        self.labels.iter().filter(|b| **b).count()
    }

    pub fn raw_provenance(&self) -> &str {
        &self.provenance
    }

    pub fn provenance(&self) -> Result<Provenance> {
        Ok(serde_json::from_str(&self.provenance)?)
    }

    pub fn dataset_digest(&self) -> u64 {
        self.dataset_digest
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn write_to<W: Write>(&self, sink: W) -> Result<u64> {
        let blob_len = u32::try_from(self.provenance.len())
            .map_err(|_| Error::invalid("provenance blob exceeds u32 length"))?;
        let mut w = CountingWriter::new(sink);
        w.put(&MASK_MAGIC)?;
        w.u32(MASK_VERSION)?;
        w.u64(self.dataset_digest)?;
        w.u64(self.labels.len() as u64)?;
        w.put(&pack_bits(&self.labels))?;
        w.u32(blob_len)?;
        w.put(self.provenance.as_bytes())?;
        Ok(w.count())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec never fails");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("TKMK", bytes);
        r.magic(MASK_MAGIC)?;
        r.version(MASK_VERSION)?;
        let dataset_digest = r.u64("dataset_digest")?;
        let count = r.u64("token_count")?;
        let n_bytes = r.expect_room(count.div_ceil(8), 1, "label bitset")?;
        let at = r.offset();
        let packed = r.take(n_bytes, "label bitset")?;
        let labels = unpack_bits(packed, count as usize)
            .ok_or_else(|| r.malformed_at(at + n_bytes.saturating_sub(1), "non-zero padding bits"))?;
        let blob_len = r.u32("provenance length")? as usize;
        let at = r.offset();
        let blob = r.take(blob_len, "provenance")?;
        let provenance = String::from_utf8(blob.to_vec())
            .map_err(|_| r.malformed_at(at, "provenance is not UTF-8"))?;
        r.finish()?;
        Ok(Self {
            labels,
            provenance,
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

/// Checks length and digest, and that only response tokens are selected.
pub fn align_mask(mask: &TokenMask, dataset: &Dataset) -> Result<()> {
    if mask.len() != dataset.total_tokens() {
        return Err(Error::LengthMismatch {
            what: "mask labels",
            expected: dataset.total_tokens(),
            found: mask.len(),
        });
    }
    if mask.dataset_digest != dataset.digest() {
        return Err(Error::DigestMismatch {
            what: "token mask".into(),
            expected: dataset.digest(),
            found: mask.dataset_digest,
        });
    }
    let response = dataset.response_labels();
    if let Some(i) = (0..mask.len()).find(|&i| mask.labels[i] && !response[i]) {
        let sample_ids = dataset.sample_ids();
        let s = sample_ids[i] as usize;
        return Err(Error::InvalidRecord {
            sample_id: s as u64,
            position: (i - dataset.sample_range(s).start) as u32,
            reason: "mask selects a prompt token".into(),
        });
    }
    Ok(())
}

/// LSB-first within each byte.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, b) in bits.iter().enumerate() {
        if *b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

/// Inverse of [`pack_bits`]; `None` if padding bits past `count` are set.
pub fn unpack_bits(bytes: &[u8], count: usize) -> Option<Vec<bool>> {
    let bits: Vec<bool> = (0..count).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
    let rem = count % 8;
    if rem != 0 && bytes[bytes.len() - 1] >> rem != 0 {
        return None;
    }
    Some(bits)
}
