use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corruption {
    /// A corrupted token is uniform over the other tokens.
    UniformOther,
    /// A corrupted token is always `(true + 1) mod tokens`, so all noise in a
    /// context piles onto one wrong answer.
    AdversarialFlip,
}

/// A next-token task with a unique clean answer per context and label noise at rate `eta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisySpec {
    pub contexts: u32,
    pub tokens: u32,
    pub true_map: Vec<u32>,
    pub eta: f64,
    pub corruption: Corruption,
    pub context_probs: Vec<f64>,
}

impl NoisySpec {
    pub fn new(
        true_map: Vec<u32>,
        tokens: u32,
        eta: f64,
        corruption: Corruption,
        context_probs: Vec<f64>,
    ) -> Result<Self> {
        let spec = NoisySpec {
            contexts: true_map.len() as u32,
            tokens,
            true_map,
            eta,
            corruption,
            context_probs,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Uniform contexts with `true_map(c) = c mod tokens`.
    pub fn uniform(contexts: u32, tokens: u32, eta: f64, corruption: Corruption) -> Result<Self> {
        let map = (0..contexts).map(|c| c % tokens.max(1)).collect();
        Self::new(map, tokens, eta, corruption, vec![1.0 / contexts.max(1) as f64; contexts as usize])
    }

    pub fn validate(&self) -> Result<()> {
        if self.contexts < 1 || self.tokens < 2 {
            return Err(Error::invalid("need at least one context and two tokens"));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta {} outside [0, 1)", self.eta)));
        }
        if self.true_map.len() != self.contexts as usize || self.true_map.iter().any(|t| *t >= self.tokens) {
            return Err(Error::invalid("true_map must give a valid token for every context"));
        }
        if self.context_probs.len() != self.contexts as usize || self.context_probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::invalid("context_probs must be non-negative, one per context"));
        }
        let total: f64 = self.context_probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("context_probs sum to {total}, not 1")));
        }
        Ok(())
    }

    fn corrupt(&self, clean: u32, rng: &mut impl Rng) -> u32 {
        match self.corruption {
            Corruption::AdversarialFlip => (clean + 1) % self.tokens,
            Corruption::UniformOther => {
                let t = rng.random_range(0..self.tokens - 1);
                if t >= clean {
                    t + 1
                } else {
                    t
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledToken {
    pub context: u32,
    pub token: u32,
    /// Whether `token` is the clean answer (hidden from the learner).
    pub clean: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDataset {
    pub contexts: u32,
    pub tokens: u32,
    pub items: Vec<LabeledToken>,
}

impl NoisyDataset {
    pub fn empty_like(&self) -> Self {
        NoisyDataset {
            contexts: self.contexts,
            tokens: self.tokens,
            items: Vec::new(),
        }
    }

    /// Realized corruption fraction (0 for an empty set).
    pub fn empirical_eta(&self) -> f64 {
        if self.items.is_empty() {
            return 0.0;
        }
        self.items.iter().filter(|t| !t.clean).count() as f64 / self.items.len() as f64
    }
}

/// Draws `m` i.i.d. tokens; each is corrupted independently with probability `eta`.
pub fn generate_noisy_task(spec: &NoisySpec, m: usize, seed: u64) -> Result<NoisyDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let contexts = WeightedIndex::new(&spec.context_probs).map_err(|e| Error::invalid(e.to_string()))?;
    let items = (0..m)
        .map(|_| {
            let c = contexts.sample(&mut rng) as u32;
            let truth = spec.true_map[c as usize];
            if rng.random::<f64>() < spec.eta {
                LabeledToken {
                    context: c,
                    token: spec.corrupt(truth, &mut rng),
                    clean: false,
                }
            } else {
                LabeledToken {
                    context: c,
                    token: truth,
                    clean: true,
                }
            }
        })
        .collect();
    Ok(NoisyDataset {
        contexts: spec.contexts,
        tokens: spec.tokens,
        items,
    })
}

/// A total prediction table over the context space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Hypothesis {
    pub table: Vec<u32>,
}

/// Exact expected clean 0-1 loss over the context distribution.
pub fn clean_risk(h: &Hypothesis, spec: &NoisySpec) -> f64 {
    spec.context_probs
        .iter()
        .zip(&spec.true_map)
        .zip(&h.table)
        .filter(|((_, truth), pred)| truth != pred)
        .fold(0.0, |acc, ((p, _), _)| acc + p)
}
