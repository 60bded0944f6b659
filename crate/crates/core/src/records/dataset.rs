use std::io::Write;
use std::ops::Range;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::wire::{ByteReader, CountingWriter, HashSink};

pub const RECORD_MAGIC: [u8; 4] = *b"TKCL";
pub const RECORD_VERSION: u32 = 1;
/// Header bytes: magic, version, vocab_size, sample_count, token_count.
pub const RECORD_HEADER_BYTES: usize = 4 + 4 + 4 + 8 + 8;
/// Per-token bytes: sample_id, position, token_id, flags, 3 pad bytes.
pub const RECORD_BYTES: usize = 8 + 4 + 4 + 1 + 3;

const FLAG_RESPONSE: u8 = 0b1;

/// One token of the record file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenRecord {
    pub sample_id: u64,
    pub position: u32,
    pub token_id: u32,
    /// Response tokens carry the noisy label 1; prompt tokens carry 0 and are never scored.
    pub is_response: bool,
}

/// Borrowed view of one sample.
#[derive(Debug, Clone, Copy)]
pub struct SampleView<'a> {
    pub sample_id: u64,
    pub tokens: &'a [u32],
    pub response: &'a [bool],
}

impl SampleView<'_> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A token dataset in canonical record order (sample asc, position asc).
///
/// Storage is flat: `offsets[i]..offsets[i + 1]` is the token range of sample `i`.
/// Positions are implicit, so contiguity holds by construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    vocab_size: u32,
    offsets: Vec<usize>,
    tokens: Vec<u32>,
    response: Vec<bool>,
    digest: OnceLock<u64>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.vocab_size == other.vocab_size
            && self.offsets == other.offsets
            && self.tokens == other.tokens
            && self.response == other.response
    }
}

impl Eq for Dataset {}

impl Dataset {
    /// Builds a dataset from per-sample `(token_id, is_response)` sequences.
    pub fn from_samples<S, I>(vocab_size: u32, samples: S) -> Result<Self>
    where
        S: IntoIterator<Item = I>,
        I: IntoIterator<Item = (u32, bool)>,
    {
        let mut builder = DatasetBuilder::new(vocab_size)?;
        for sample in samples {
            builder.push_sample(sample)?;
        }
        Ok(builder.finish())
    }

    /// Builds a dataset from explicit records, validating ids and positions.
    pub fn from_records(
        vocab_size: u32,
        sample_count: u64,
        records: impl IntoIterator<Item = TokenRecord>,
    ) -> Result<Self> {
        let mut builder = DatasetBuilder::new(vocab_size)?;
        for r in records {
            builder.push_record(r, sample_count)?;
        }
        builder.close_until(sample_count)?;
        Ok(builder.finish())
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn num_samples(&self) -> usize {
        self.offsets.len() - 1
    }

    /// M: total number of tokens across all samples.
    pub fn total_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Noisy labels in record order (true for response tokens).
    pub fn response_labels(&self) -> &[bool] {
        &self.response
    }

    pub fn eligible_count(&self) -> usize {
        self.response.iter().filter(|r| **r).count()
    }

    pub fn sample_range(&self, sample: usize) -> Range<usize> {
        self.offsets[sample]..self.offsets[sample + 1]
    }

    pub fn sample_lengths(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn sample(&self, sample: usize) -> SampleView<'_> {
        let range = self.sample_range(sample);
        SampleView {
            sample_id: sample as u64,
            tokens: &self.tokens[range.clone()],
            response: &self.response[range],
        }
    }

    pub fn samples(&self) -> impl ExactSizeIterator<Item = SampleView<'_>> + '_ {
        (0..self.num_samples()).map(move |i| self.sample(i))
    }

    /// Flat index of `(sample_id, position)` in record order.
    pub fn flat_index(&self, sample_id: u64, position: u32) -> Option<usize> {
        let s = usize::try_from(sample_id).ok()?;
        if s >= self.num_samples() {
            return None;
        }
        let range = self.sample_range(s);
        let idx = range.start + position as usize;
        (idx < range.end).then_some(idx)
    }

    pub fn records(&self) -> impl Iterator<Item = TokenRecord> + '_ {
        (0..self.num_samples()).flat_map(move |s| {
            let range = self.sample_range(s);
            range.enumerate().map(move |(pos, idx)| TokenRecord {
                sample_id: s as u64,
                position: pos as u32,
                token_id: self.tokens[idx],
                is_response: self.response[idx],
            })
        })
    }

    /// Sample id of every token, in record order.
    pub fn sample_ids(&self) -> Vec<u64> {
        let mut out = Vec::with_capacity(self.total_tokens());
        for s in 0..self.num_samples() {
            out.extend(std::iter::repeat_n(s as u64, self.sample_range(s).len()));
        }
        out
    }

    /// Sub-dataset holding the given samples (in the given order), renumbered densely.
    pub fn subset(&self, samples: &[usize]) -> Result<Dataset> {
        let mut builder = DatasetBuilder::new(self.vocab_size)?;
        for &s in samples {
            if s >= self.num_samples() {
                return Err(Error::invalid(format!("sample {s} out of range")));
            }
            let view = self.sample(s);
            builder.push_sample(view.tokens.iter().copied().zip(view.response.iter().copied()))?;
        }
        Ok(builder.finish())
    }

    /// Checksum of the canonical TKCL encoding; binds loss logs, scores and masks to this dataset.
    pub fn digest(&self) -> u64 {
        *self.digest.get_or_init(|| {
            let mut sink = HashSink::new();
            self.write_to(&mut sink).expect("hashing never fails");
            sink.finish()
        })
    }

    /// Encodes the TKCL record format, returning the byte count.
    pub fn write_to<W: Write>(&self, sink: W) -> Result<u64> {
        let mut w = CountingWriter::new(sink);
        w.put(&RECORD_MAGIC)?;
        w.u32(RECORD_VERSION)?;
        w.u32(self.vocab_size)?;
        w.u64(self.num_samples() as u64)?;
        w.u64(self.total_tokens() as u64)?;
        let mut rec = [0u8; RECORD_BYTES];
        for s in 0..self.num_samples() {
            let range = self.sample_range(s);
            rec[0..8].copy_from_slice(&(s as u64).to_le_bytes());
            for (pos, idx) in range.enumerate() {
                rec[8..12].copy_from_slice(&(pos as u32).to_le_bytes());
                rec[12..16].copy_from_slice(&self.tokens[idx].to_le_bytes());
                rec[16] = if self.response[idx] { FLAG_RESPONSE } else { 0 };
                w.put(&rec)?;
            }
        }
        Ok(w.count())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RECORD_HEADER_BYTES + RECORD_BYTES * self.total_tokens());
        self.write_to(&mut out).expect("writing to a Vec never fails");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = ByteReader::new("TKCL", bytes);
        r.magic(RECORD_MAGIC)?;
        r.version(RECORD_VERSION)?;
        let vocab_size = r.u32("vocab_size")?;
        if vocab_size == 0 {
            return Err(r.malformed("vocab_size must be positive"));
        }
        let sample_count = r.u64("sample_count")?;
        let token_count = r.u64("token_count")?;

        let mut builder = DatasetBuilder::new(vocab_size)?;
        builder.reserve(token_count.min((r.remaining() / RECORD_BYTES) as u64) as usize);
        for _ in 0..token_count {
            let at = r.offset();
            let sample_id = r.u64("sample_id")?;
            let position = r.u32("position")?;
            let token_id = r.u32("token_id")?;
            let flags = r.u8("flags")?;
            let pad = r.take(3, "pad")?;
            if flags & !FLAG_RESPONSE != 0 {
                return Err(r.malformed_at(at, format!("unknown flag bits {flags:#04x}")));
            }
            if pad != [0, 0, 0] {
                return Err(r.malformed_at(at, "non-zero padding"));
            }
            let record = TokenRecord {
                sample_id,
                position,
                token_id,
                is_response: flags & FLAG_RESPONSE != 0,
            };
            builder.push_record(record, sample_count)?;
        }
        r.finish()?;
        builder.close_until(sample_count)?;
        Ok(builder.finish())
    }

    pub fn read_from<R: std::io::Read>(source: R) -> Result<Dataset> {
        Dataset::from_bytes(&crate::wire::read_all(source)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Dataset> {
        Dataset::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::wire::write_atomic(path, &self.to_bytes())
    }
}

/// Free-function form of [`Dataset::write_to`].
pub fn encode_records<W: Write>(dataset: &Dataset, sink: W) -> Result<u64> {
    dataset.write_to(sink)
}

/// Free-function form of [`Dataset::read_from`].
pub fn decode_records<R: std::io::Read>(source: R) -> Result<Dataset> {
    Dataset::read_from(source)
}

struct DatasetBuilder {
    vocab_size: u32,
    offsets: Vec<usize>,
    tokens: Vec<u32>,
    response: Vec<bool>,
    // sample currently receiving records and the next expected position
    open: Option<(u64, u32)>,
}

impl DatasetBuilder {
    fn new(vocab_size: u32) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::invalid("vocab_size must be positive"));
        }
        Ok(Self {
            vocab_size,
            offsets: vec![0],
            tokens: Vec::new(),
            response: Vec::new(),
            open: None,
        })
    }

    fn reserve(&mut self, n: usize) {
        self.tokens.reserve(n);
        self.response.reserve(n);
    }

    fn push_sample(&mut self, sample: impl IntoIterator<Item = (u32, bool)>) -> Result<()> {
        let sample_id = (self.offsets.len() - 1) as u64;
        let start = self.tokens.len();
        for (pos, (token, resp)) in sample.into_iter().enumerate() {
            if token >= self.vocab_size {
                return Err(Error::InvalidRecord {
                    sample_id,
                    position: pos as u32,
                    reason: format!("token_id {token} >= vocab_size {}", self.vocab_size),
                });
            }
            self.tokens.push(token);
            self.response.push(resp);
        }
        if self.tokens.len() == start {
            return Err(Error::InvalidRecord {
                sample_id,
                position: 0,
                reason: "sample has no tokens".into(),
            });
        }
        self.offsets.push(self.tokens.len());
        Ok(())
    }

    fn push_record(&mut self, r: TokenRecord, sample_count: u64) -> Result<()> {
        let bad = |reason: String| Error::InvalidRecord {
            sample_id: r.sample_id,
            position: r.position,
            reason,
        };
        if r.sample_id >= sample_count {
            return Err(bad(format!("sample_id beyond sample_count {sample_count}")));
        }
        if r.token_id >= self.vocab_size {
            return Err(bad(format!("token_id {} >= vocab_size {}", r.token_id, self.vocab_size)));
        }
        match self.open {
            Some((s, next)) if s == r.sample_id => {
                if r.position != next {
                    return Err(bad(format!("non-contiguous position, expected {next}")));
                }
            }
            Some((s, _)) if r.sample_id < s => {
                return Err(bad(format!("sample_id out of order after sample {s}")));
            }
            _ => {
                if r.position != 0 {
                    return Err(bad("non-contiguous position, samples start at 0".into()));
                }
                self.close_open();
                let expected = (self.offsets.len() - 1) as u64;
                if r.sample_id != expected {
                    return Err(bad(format!("sample ids must be dense, expected sample {expected}")));
                }
            }
        }
        self.tokens.push(r.token_id);
        self.response.push(r.is_response);
        self.open = Some((r.sample_id, r.position + 1));
        Ok(())
    }

    fn close_open(&mut self) {
        if self.open.take().is_some() {
            self.offsets.push(self.tokens.len());
        }
    }

    /// Closes the open sample and checks the declared sample count.
    fn close_until(&mut self, sample_count: u64) -> Result<()> {
        self.close_open();
        let found = self.offsets.len() - 1;
        if found as u64 != sample_count {
            return Err(Error::invalid(format!(
                "header declares {sample_count} samples but records cover {found}"
            )));
        }
        Ok(())
    }

    fn finish(self) -> Dataset {
        Dataset {
            vocab_size: self.vocab_size,
            offsets: self.offsets,
            tokens: self.tokens,
            response: self.response,
            digest: OnceLock::new(),
        }
    }
}
