//! Synthetic corpora with a known split between informative and filler tokens.
//!
//! Responses follow a sparse Markov chain over "informative" tokens, with
//! filler tokens (uniform, unpredictable) injected at a fixed rate. The base
//! model is trained on prompts followed by filler only, so it knows the filler
//! language but not the informative one. Held-out evaluation masks in only the
//! informative response tokens.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::records::{Dataset, Provenance, TokenMask};
use crate::wire;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub train_samples: usize,
    pub heldout_samples: usize,
    pub base_samples: usize,
    pub prompt_vocab: u32,
    pub informative_vocab: u32,
    pub filler_vocab: u32,
    pub prompt_len: usize,
    pub response_len: usize,
    /// Probability that a response position holds a filler token.
    pub filler_rate: f64,
    /// Probability of an informative token's main successor (the other successor takes the rest).
    pub main_successor: f64,
}

// Vocabularies are small enough that every filler-to-informative bigram shows
// up in the warmup split. With sparse pair coverage a count model never learns
// the unseen pairs under cleaning, and selection loses to full fine-tuning.
impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            train_samples: 500,
            heldout_samples: 200,
            base_samples: 300,
            prompt_vocab: 4,
            informative_vocab: 8,
            filler_vocab: 8,
            prompt_len: 4,
            response_len: 20,
            filler_rate: 0.4,
            main_successor: 0.7,
        }
    }
}

impl SynthSpec {
    pub fn vocab_size(&self) -> u32 {
        self.prompt_vocab + self.informative_vocab + self.filler_vocab
    }

    pub fn is_informative(&self, token: u32) -> bool {
        (self.prompt_vocab..self.prompt_vocab + self.informative_vocab).contains(&token)
    }

    /// Display strings: `p<i>` prompt, `w<i>` informative, `f<i>` filler.
    pub fn token_name(&self, token: u32) -> String {
        if token < self.prompt_vocab {
            format!("p{token}")
        } else if self.is_informative(token) {
            format!("w{}", token - self.prompt_vocab)
        } else {
            format!("f{}", token - self.prompt_vocab - self.informative_vocab)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.prompt_vocab == 0 || self.informative_vocab < 2 || self.filler_vocab == 0 {
            return Err(Error::invalid("synthetic vocabularies too small"));
        }
        if self.response_len == 0 {
            return Err(Error::invalid("response_len must be positive"));
        }
        if !(0.0..1.0).contains(&self.filler_rate) || !(0.0..=1.0).contains(&self.main_successor) {
            return Err(Error::invalid("filler_rate must be in [0,1) and main_successor in [0,1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub train: Dataset,
    pub base: Dataset,
    pub heldout: Dataset,
    /// Informative response tokens of `heldout`.
    pub heldout_informative: TokenMask,
    /// Informative response tokens of `train`, in record order.
    pub train_informative: Vec<bool>,
}

pub fn generate(spec: &SynthSpec, seed: u64) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inf = spec.informative_vocab;
    // two distinct successors per informative state
    let successors: Vec<(u32, u32)> = (0..inf)
        .map(|_| {
            let a = rng.random_range(0..inf);
            let mut b = rng.random_range(0..inf - 1);
            if b >= a {
                b += 1;
            }
            (a, b)
        })
        .collect();

    let sample = |rng: &mut ChaCha8Rng, filler_only: bool| -> Vec<(u32, bool)> {
        let mut out: Vec<(u32, bool)> = (0..spec.prompt_len)
            .map(|_| (rng.random_range(0..spec.prompt_vocab), false))
            .collect();
        let mut state = rng.random_range(0..inf);
        for _ in 0..spec.response_len {
            if filler_only || rng.random::<f64>() < spec.filler_rate {
                let f = rng.random_range(0..spec.filler_vocab);
                out.push((spec.prompt_vocab + inf + f, true));
            } else {
                out.push((spec.prompt_vocab + state, true));
                let (a, b) = successors[state as usize];
                state = if rng.random::<f64>() < spec.main_successor { a } else { b };
            }
        }
        out
    };

    let vocab = spec.vocab_size();
    let train = Dataset::from_samples(vocab, (0..spec.train_samples).map(|_| sample(&mut rng, false)).collect::<Vec<_>>())?;
    let heldout = Dataset::from_samples(vocab, (0..spec.heldout_samples).map(|_| sample(&mut rng, false)).collect::<Vec<_>>())?;
    let base = Dataset::from_samples(vocab, (0..spec.base_samples).map(|_| sample(&mut rng, true)).collect::<Vec<_>>())?;

    let informative = |d: &Dataset| -> Vec<bool> {
        d.tokens()
            .iter()
            .zip(d.response_labels())
            .map(|(t, r)| *r && spec.is_informative(*t))
            .collect()
    };
    let mut prov = Provenance::new("informative-only");
    prov.seed = Some(seed);
    let heldout_informative = TokenMask::new(informative(&heldout), &prov, heldout.digest());
    Ok(SynthCorpus {
        spec: spec.clone(),
        train_informative: informative(&train),
        train,
        base,
        heldout,
        heldout_informative,
    })
}

/// Paths of a bundle written by [`write_bundle`].
#[derive(Debug, Clone)]
pub struct Bundle {
    pub train: PathBuf,
    pub base: PathBuf,
    pub heldout: PathBuf,
    pub heldout_mask: PathBuf,
    pub detok: PathBuf,
    pub config: PathBuf,
}

/// Writes the corpus files, a detokenization table and a ready-to-run
/// self-evolving configuration into `dir`.
pub fn write_bundle(corpus: &SynthCorpus, dir: &Path, seed: u64) -> Result<Bundle> {
    std::fs::create_dir_all(dir)?;
    let bundle = Bundle {
        train: dir.join("train.tkcl"),
        base: dir.join("base.tkcl"),
        heldout: dir.join("heldout.tkcl"),
        heldout_mask: dir.join("heldout_informative.tkmk"),
        detok: dir.join("detok.tsv"),
        config: dir.join("config.toml"),
    };
    corpus.train.save(&bundle.train)?;
    corpus.base.save(&bundle.base)?;
    corpus.heldout.save(&bundle.heldout)?;
    corpus.heldout_informative.save(&bundle.heldout_mask)?;
    let detok: String = (0..corpus.spec.vocab_size())
        .map(|t| format!("{t}\t{}\n", corpus.spec.token_name(t)))
        .collect();
    wire::write_atomic(&bundle.detok, detok.as_bytes())?;
    let config = format!(
        r#"run_name = "synthetic"
mode = "self-evolving"
records = "train.tkcl"
output_dir = "run"
iterations = 4
seed = {seed}
k_percent = 60.0
normalization = "global"
scoring_base = "fixed-base"
engine = "exact"

[model]
order = 2
alpha = 0.1
weight = 1.0
base_corpus = "base.tkcl"

[eval]
heldout = "heldout.tkcl"
heldout_mask = "heldout_informative.tkmk"
"#
    );
    wire::write_atomic(&bundle.config, config.as_bytes())?;
    Ok(bundle)
}
