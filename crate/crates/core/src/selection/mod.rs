//! Turning scores into masks: global top-k%, per-sample top-k%, uniform random.

mod exact;
mod sketch;

use std::fmt;
use std::io::{BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use exact::{nth_cutoff, rank_cmp, top_n_flags, two_pass_cutoff, Cutoff};
pub use sketch::{capacity_for, streaming_threshold, QuantileSketch, MAX_EPSILON};

use crate::error::{Error, Result};
use crate::records::{Dataset, Provenance, TokenMask};
use crate::scoring::{eligible_indices, ScoreTable, SCORE_MAGIC, SCORE_VERSION};
use crate::wire::ByteReader;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    Global,
    Local,
    UniformRandom,
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMode::Global => "global",
            SelectionMode::Local => "local",
            SelectionMode::UniformRandom => "uniform-random",
        })
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(SelectionMode::Global),
            "local" => Ok(SelectionMode::Local),
            "uniform-random" => Ok(SelectionMode::UniformRandom),
            _ => Err(Error::invalid(format!("unknown selection mode {s:?}"))),
        }
    }
}

/// How global top-k is computed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Engine {
    #[default]
    Exact,
    /// One-pass sketch threshold; the kept count is within ε·M of the exact count.
    Streaming { epsilon: f64 },
}

impl Engine {
    pub fn validate(&self) -> Result<()> {
        if let Engine::Streaming { epsilon } = self {
            if !(*epsilon > 0.0 && *epsilon <= MAX_EPSILON) {
                return Err(Error::invalid(format!("epsilon {epsilon} outside (0, {MAX_EPSILON}]")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Engine::Exact => f.write_str("exact"),
            Engine::Streaming { epsilon } => write!(f, "streaming({epsilon})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionConfig {
    pub mode: SelectionMode,
    pub k_percent: f64,
    pub seed: Option<u64>,
    pub engine: Engine,
}

impl SelectionConfig {
    pub fn global(k_percent: f64) -> Self {
        Self {
            mode: SelectionMode::Global,
            k_percent,
            seed: None,
            engine: Engine::Exact,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_k(self.k_percent)?;
        self.engine.validate()?;
        if self.mode == SelectionMode::UniformRandom && self.seed.is_none() {
            return Err(Error::invalid("uniform-random selection requires a seed"));
        }
        Ok(())
    }

    fn provenance(&self, table: Option<&ScoreTable>) -> Provenance {
        let mut p = Provenance::new(self.mode.to_string());
        p.k_percent = Some(self.k_percent);
        p.seed = self.seed.filter(|_| self.mode == SelectionMode::UniformRandom);
        if self.mode == SelectionMode::Global {
            p.engine = Some(self.engine.to_string());
        }
        if let Some(t) = table {
            p.model_ids = vec![t.base_model_id.clone(), t.ref_model_id.clone()];
        }
        p
    }
}

/// Applies `config` to a score table (uniform-random ignores the scores).
pub fn select(dataset: &Dataset, table: &ScoreTable, config: &SelectionConfig) -> Result<TokenMask> {
    config.validate()?;
    match config.mode {
        SelectionMode::Global => match config.engine {
            Engine::Exact => select_global_topk(dataset, table, config.k_percent),
            Engine::Streaming { epsilon } => select_global_streaming(dataset, table, config.k_percent, epsilon),
        },
        SelectionMode::Local => select_local_topk(dataset, table, config.k_percent),
        SelectionMode::UniformRandom => {
            select_uniform_random(dataset, config.k_percent, config.seed.expect("validated"))
        }
    }
}

pub(crate) fn check_k(k_percent: f64) -> Result<()> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::invalid(format!("k_percent {k_percent} outside (0, 100]")));
    }
    Ok(())
}

/// `floor(k/100 · eligible)`.
pub fn select_count(k_percent: f64, eligible: usize) -> usize {
    ((k_percent * eligible as f64) / 100.0).floor() as usize
}

fn mask_from(dataset: &Dataset, eligible: &[usize], chosen: impl Fn(usize) -> bool, prov: &Provenance) -> TokenMask {
    let mut labels = vec![false; dataset.total_tokens()];
    for (e, &flat) in eligible.iter().enumerate() {
        if chosen(e) {
            labels[flat] = true;
        }
    }
    TokenMask::new(labels, prov, dataset.digest())
}

/// Keeps exactly `floor(k/100 · eligible)` tokens, best first across the whole dataset.
pub fn select_global_topk(dataset: &Dataset, table: &ScoreTable, k_percent: f64) -> Result<TokenMask> {
    check_k(k_percent)?;
    let eligible = table.check_against(dataset)?;
    let n = select_count(k_percent, eligible.len());
    if n == 0 {
        return Err(Error::EmptySelection {
            k_percent,
            eligible: eligible.len(),
        });
    }
    let scores = table.scores();
    let cut = nth_cutoff(&scores, n)?;
    let prov = SelectionConfig::global(k_percent).provenance(Some(table));
    Ok(mask_from(dataset, &eligible, |e| cut.admits(scores[e], e), &prov))
}

/// Global selection through the one-pass sketch threshold: keeps every score ≥ t.
pub fn select_global_streaming(
    dataset: &Dataset,
    table: &ScoreTable,
    k_percent: f64,
    epsilon: f64,
) -> Result<TokenMask> {
    check_k(k_percent)?;
    let eligible = table.check_against(dataset)?;
    if select_count(k_percent, eligible.len()) == 0 {
        return Err(Error::EmptySelection {
            k_percent,
            eligible: eligible.len(),
        });
    }
    let scores = table.scores();
    let t = streaming_threshold(&scores, k_percent, epsilon)?;
    let config = SelectionConfig {
        engine: Engine::Streaming { epsilon },
        ..SelectionConfig::global(k_percent)
    };
    Ok(mask_from(dataset, &eligible, |e| scores[e] >= t, &config.provenance(Some(table))))
}

/// Per-sample top-k%: each sample with response tokens keeps `max(1, floor(k/100 · L_resp))`.
pub fn select_local_topk(dataset: &Dataset, table: &ScoreTable, k_percent: f64) -> Result<TokenMask> {
    check_k(k_percent)?;
    let eligible = table.check_against(dataset)?;
    let mut chosen = vec![false; eligible.len()];
    let mut start = 0;
    while start < table.entries.len() {
        let sample = table.entries[start].sample_id;
        let end = start + table.entries[start..].iter().take_while(|e| e.sample_id == sample).count();
        let scores: Vec<f64> = table.entries[start..end].iter().map(|e| e.score).collect();
        let n = select_count(k_percent, scores.len()).max(1);
        for (i, keep) in top_n_flags(&scores, n)?.into_iter().enumerate() {
            chosen[start + i] = keep;
        }
        start = end;
    }
    let config = SelectionConfig {
        mode: SelectionMode::Local,
        ..SelectionConfig::global(k_percent)
    };
    Ok(mask_from(dataset, &eligible, |e| chosen[e], &config.provenance(Some(table))))
}

/// `floor(k/100 · eligible)` response tokens drawn without replacement.
pub fn select_uniform_random(dataset: &Dataset, k_percent: f64, seed: u64) -> Result<TokenMask> {
    check_k(k_percent)?;
    let eligible = eligible_indices(dataset);
    let n = select_count(k_percent, eligible.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; eligible.len()];
    for i in rand::seq::index::sample(&mut rng, eligible.len(), n) {
        chosen[i] = true;
    }
    let config = SelectionConfig {
        mode: SelectionMode::UniformRandom,
        seed: Some(seed),
        ..SelectionConfig::global(k_percent)
    };
    Ok(mask_from(dataset, &eligible, |e| chosen[e], &config.provenance(None)))
}

/// Exact global selection reading scores from a TKSC file twice instead of loading it.
pub fn select_global_from_file(dataset: &Dataset, scores_path: &Path, k_percent: f64) -> Result<TokenMask> {
    check_k(k_percent)?;
    let header = ScoreFileHeader::read(scores_path)?;
    if header.dataset_digest != dataset.digest() {
        return Err(Error::DigestMismatch {
            what: format!("score file {}", scores_path.display()),
            expected: dataset.digest(),
            found: header.dataset_digest,
        });
    }
    let eligible = eligible_indices(dataset);
    if header.entry_count != eligible.len() as u64 {
        return Err(Error::LengthMismatch {
            what: "score entries",
            expected: eligible.len(),
            found: header.entry_count as usize,
        });
    }
    let n = select_count(k_percent, eligible.len());
    if n == 0 {
        return Err(Error::EmptySelection {
            k_percent,
            eligible: eligible.len(),
        });
    }
    let source = || ScoreFileHeader::stream(scores_path);
    let cut = two_pass_cutoff(source, n, 0.01)?;

    let mut labels = vec![false; dataset.total_tokens()];
    for (e, s) in ScoreFileHeader::stream(scores_path)?.enumerate() {
        if cut.admits(s?, e) {
            labels[eligible[e]] = true;
        }
    }
    let mut prov = SelectionConfig::global(k_percent).provenance(None);
    prov.model_ids = vec![header.base_model_id, header.ref_model_id];
    Ok(TokenMask::new(labels, &prov, dataset.digest()))
}

struct ScoreFileHeader {
    dataset_digest: u64,
    base_model_id: String,
    ref_model_id: String,
    entry_count: u64,
    header_len: usize,
}

impl ScoreFileHeader {
    fn read(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut head = vec![0u8; 16 + 2];
        f.read_exact(&mut head)?;
        let base_len = u16::from_le_bytes([head[16], head[17]]) as usize;
        let mut rest = vec![0u8; base_len + 2];
        f.read_exact(&mut rest)?;
        head.extend_from_slice(&rest);
        let ref_len = u16::from_le_bytes([rest[base_len], rest[base_len + 1]]) as usize;
        let mut rest = vec![0u8; ref_len + 8];
        f.read_exact(&mut rest)?;
        head.extend_from_slice(&rest);

        let mut r = ByteReader::new("TKSC", &head);
        r.magic(SCORE_MAGIC)?;
        r.version(SCORE_VERSION)?;
        let dataset_digest = r.u64("dataset_digest")?;
        let base_model_id = r.short_str("base_model_id")?;
        let ref_model_id = r.short_str("ref_model_id")?;
        let entry_count = r.u64("entry_count")?;
        r.finish()?;
        Ok(Self {
            dataset_digest,
            base_model_id,
            ref_model_id,
            entry_count,
            header_len: head.len(),
        })
    }

    /// Scores in file order, read through a buffer.
    fn stream(path: &Path) -> Result<impl Iterator<Item = Result<f64>>> {
        let header = Self::read(path)?;
        let mut f = BufReader::with_capacity(1 << 20, std::fs::File::open(path)?);
        std::io::copy(&mut (&mut f).take(header.header_len as u64), &mut std::io::sink())?;
        let mut remaining = header.entry_count;
        Ok(std::iter::from_fn(move || {
            if remaining == 0 {
                return None;
            }
            remaining -= 1;
            let mut rec = [0u8; 20];
            Some(match f.read_exact(&mut rec) {
                Ok(()) => Ok(f64::from_le_bytes(rec[12..20].try_into().expect("8 bytes"))),
                Err(e) => Err(e.into()),
            })
        }))
    }
}
