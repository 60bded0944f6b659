use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::Normalization;
use crate::selection::{Engine, SelectionMode, MAX_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Iterative split, score, select, fine-tune.
    SelfEvolving,
    /// One-shot scoring of the whole dataset with a fixed model pair.
    Fixed,
    /// Fixed pair, stop after writing scores.
    ScoreOnly,
    /// Fixed pair, stop after writing the mask.
    SelectOnly,
}

/// Which model plays θ when scoring split `t` against θ_t.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringBase {
    /// The original base model θ_0 at every iteration.
    #[default]
    FixedBase,
    /// θ_{t-1}, the model before the latest update.
    PreviousReference,
    /// The warmup model θ_1 at every iteration; all scores vanish at t = 1.
    WarmupBase,
}

impl ScoringBase {
    /// Index into θ_0..θ_t of the base model for iteration `t` (t ≥ 1).
    pub fn base_index(self, t: usize) -> usize {
        match self {
            ScoringBase::FixedBase => 0,
            ScoringBase::PreviousReference => t - 1,
            ScoringBase::WarmupBase => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKind {
    #[default]
    Exact,
    Streaming,
}

/// Embedded count-model settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_order")]
    pub order: u32,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Count weight of each fine-tuning pass.
    #[serde(default = "default_weight")]
    pub weight: f64,
    /// Corpus θ_0 is trained on (all tokens).
    pub base_corpus: Option<PathBuf>,
    /// Ready-made θ_0 snapshot; takes precedence over `base_corpus`.
    pub base_model: Option<PathBuf>,
    /// Fixed-model reference snapshot.
    pub reference_model: Option<PathBuf>,
    /// Fixed-model reference: θ_0 fine-tuned on every response token of this corpus.
    pub reference_corpus: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            order: default_order(),
            alpha: default_alpha(),
            weight: default_weight(),
            base_corpus: None,
            base_model: None,
            reference_model: None,
            reference_corpus: None,
        }
    }
}

/// External trainer invoked through the command contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    /// Program and leading arguments.
    pub command: Vec<String>,
    /// Directory holding θ_0 and its manifest.
    pub base_model: PathBuf,
    /// Directory holding the fixed-model reference and its manifest.
    pub reference_model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub heldout: PathBuf,
    /// Mask of the held-out tokens to average over; all response tokens if absent.
    pub heldout_mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_name: String,
    pub mode: RunMode,
    pub records: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_iterations")]
    pub iterations: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_k")]
    pub k_percent: f64,
    #[serde(default = "default_selection")]
    pub selection: SelectionMode,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub scoring_base: ScoringBase,
    #[serde(default)]
    pub engine: EngineKind,
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub model: ModelConfig,
    pub trainer: Option<TrainerConfig>,
    pub eval: Option<EvalConfig>,
}

fn default_order() -> u32 {
    2
}
fn default_alpha() -> f64 {
    0.1
}
fn default_weight() -> f64 {
    1.0
}
fn default_iterations() -> u32 {
    4
}
fn default_k() -> f64 {
    60.0
}
fn default_selection() -> SelectionMode {
    SelectionMode::Global
}

impl RunConfig {
    /// Parses TOML and resolves relative paths against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, dir)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.records);
        fix(&mut self.output_dir);
        for p in [
            &mut self.model.base_corpus,
            &mut self.model.base_model,
            &mut self.model.reference_model,
            &mut self.model.reference_corpus,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        if let Some(t) = &mut self.trainer {
            fix(&mut t.base_model);
            if let Some(r) = &mut t.reference_model {
                fix(r);
            }
        }
        if let Some(e) = &mut self.eval {
            fix(&mut e.heldout);
            if let Some(m) = &mut e.heldout_mask {
                fix(m);
            }
        }
    }

    pub fn engine(&self) -> Result<Engine> {
        let engine = match self.engine {
            EngineKind::Exact => Engine::Exact,
            EngineKind::Streaming => Engine::Streaming {
                epsilon: self
                    .epsilon
                    .ok_or_else(|| Error::Config("streaming engine needs epsilon".into()))?,
            },
        };
        engine.validate()?;
        Ok(engine)
    }

    /// Checks ranges and that every referenced input exists.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.run_name.trim().is_empty() {
            return bad("run_name must not be empty".into());
        }
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return bad(format!("k_percent {} outside (0, 100]", self.k_percent));
        }
        if self.mode == RunMode::SelfEvolving && self.iterations < 1 {
            return bad("iterations must be at least 1".into());
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0 && eps <= MAX_EPSILON) {
                return bad(format!("epsilon {eps} outside (0, {MAX_EPSILON}]"));
            }
        }
        self.engine()?;
        if self.model.order < 1 || !(self.model.alpha > 0.0) || !(self.model.weight > 0.0) {
            return bad("model order must be >= 1, alpha and weight positive".into());
        }
        let mut inputs = vec![&self.records];
        match &self.trainer {
            Some(t) => {
                if t.command.is_empty() {
                    return bad("trainer command is empty".into());
                }
                inputs.push(&t.base_model);
                if self.mode != RunMode::SelfEvolving {
                    match &t.reference_model {
                        Some(r) => inputs.push(r),
                        None => return bad("fixed-model runs need trainer.reference_model".into()),
                    }
                }
            }
            None => {
                match (&self.model.base_model, &self.model.base_corpus) {
                    (Some(p), _) | (None, Some(p)) => inputs.push(p),
                    (None, None) => return bad("model.base_model or model.base_corpus is required".into()),
                }
                if self.mode != RunMode::SelfEvolving {
                    match (&self.model.reference_model, &self.model.reference_corpus) {
                        (Some(p), _) | (None, Some(p)) => inputs.push(p),
                        (None, None) => {
                            return bad("fixed-model runs need model.reference_model or model.reference_corpus".into())
                        }
                    }
                }
            }
        }
        if let Some(e) = &self.eval {
            inputs.push(&e.heldout);
            if let Some(m) = &e.heldout_mask {
                inputs.push(m);
            }
        }
        for p in inputs {
            if !p.exists() {
                return bad(format!("input {} does not exist", p.display()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let cfg = RunConfig::from_toml(
            r#"
run_name = "demo"
mode = "self-evolving"
records = "data/train.tkcl"
output_dir = "out"

[model]
base_corpus = "data/base.tkcl"
"#,
            Path::new("/cfg"),
        )
        .unwrap();
        assert_eq!(cfg.iterations, 4);
        assert_eq!(cfg.k_percent, 60.0);
        assert_eq!(cfg.scoring_base, ScoringBase::FixedBase);
        assert_eq!(cfg.normalization, Normalization::Global);
        assert_eq!(cfg.records, Path::new("/cfg/data/train.tkcl"));
        assert_eq!(cfg.model.base_corpus.as_deref(), Some(Path::new("/cfg/data/base.tkcl")));
        assert_eq!(cfg.engine().unwrap(), Engine::Exact);
        let again = RunConfig::from_toml(&cfg.to_toml(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let base = "run_name = \"x\"\nmode = \"fixed\"\nrecords = \"r\"\noutput_dir = \"o\"\n";
        assert!(RunConfig::from_toml(&format!("{base}bogus = 1\n"), Path::new(".")).is_err());
        assert!(RunConfig::from_toml(&base.replace("fixed", "sideways"), Path::new(".")).is_err());
        let cfg = RunConfig::from_toml(&format!("{base}k_percent = 0.0\n"), Path::new(".")).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = RunConfig::from_toml(&format!("{base}engine = \"streaming\"\n"), Path::new(".")).unwrap();
        assert!(cfg.engine().is_err());
    }

    #[test]
    fn scoring_base_indices() {
        assert_eq!(ScoringBase::FixedBase.base_index(3), 0);
        assert_eq!(ScoringBase::PreviousReference.base_index(3), 2);
        assert_eq!(ScoringBase::PreviousReference.base_index(1), 0);
        assert_eq!(ScoringBase::WarmupBase.base_index(1), 1);
    }
}
