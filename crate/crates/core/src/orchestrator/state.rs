use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::split::SplitPlan;
use super::trainer::ModelRef;
use crate::error::{Error, Result};
use crate::wire;

pub const STATE_FILE: &str = "state.json";
pub const STATE_VERSION: u32 = 1;

/// Progress marker: the last stage whose outputs are complete on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "phase")]
pub enum Phase {
    /// Splits and θ_0 are in place.
    Initialized,
    /// θ_1 exists (self-evolving warmup) or the fixed reference model is in place.
    WarmupDone,
    Scored { iteration: u32 },
    Selected { iteration: u32 },
    Trained { iteration: u32 },
    Finished,
}

/// A file the run depends on, pinned by checksum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: PathBuf,
    pub digest: String,
}

impl ArtifactRef {
    pub fn capture(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            digest: hex_digest(wire::checksum(&bytes)),
        })
    }

    pub fn verify(&self, name: &str) -> Result<()> {
        let fail = |reason: String| Error::Artifact {
            name: name.to_string(),
            path: self.path.clone(),
            reason,
        };
        let bytes = std::fs::read(&self.path).map_err(|e| fail(format!("unreadable: {e}")))?;
        let found = hex_digest(wire::checksum(&bytes));
        if found != self.digest {
            return Err(fail(format!("digest {found} does not match recorded {}", self.digest)));
        }
        Ok(())
    }
}

pub fn hex_digest(d: u64) -> String {
    format!("{d:016x}")
}

/// What one cleaning iteration did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: u32,
    pub samples: usize,
    pub tokens_scored: usize,
    pub tokens_selected: Option<usize>,
    pub base_model_id: String,
    pub ref_model_id: String,
    pub trained_model_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub format_version: u32,
    pub config: RunConfig,
    pub records_digest: String,
    pub phase: Phase,
    pub split_plan: Option<SplitPlan>,
    /// θ_0, θ_1, ... in creation order (the fixed-model reference sits at index 1).
    pub models: Vec<ModelRef>,
    /// Mask artifact names, in creation order.
    pub masks: Vec<String>,
    pub artifacts: BTreeMap<String, ArtifactRef>,
    pub iterations: Vec<IterationSummary>,
    pub heldout_loss: Option<f64>,
}

impl PipelineState {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let state: PipelineState = serde_json::from_str(&text)?;
        if state.format_version != STATE_VERSION {
            return Err(Error::UnsupportedVersion {
                format: "state",
                version: state.format_version,
            });
        }
        Ok(state)
    }

    /// Atomic write: readers see either the old or the new state.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        wire::write_atomic(path, text.as_bytes())
    }

    pub fn artifact(&self, name: &str) -> Result<&ArtifactRef> {
        self.artifacts
            .get(name)
            .ok_or_else(|| Error::invalid(format!("state has no artifact {name}")))
    }

    /// Checks every pinned artifact against its recorded digest.
    pub fn verify_artifacts(&self) -> Result<()> {
        for (name, a) in &self.artifacts {
            a.verify(name)?;
        }
        Ok(())
    }

    pub fn final_model(&self) -> Option<&ModelRef> {
        if self.phase == Phase::Finished {
            self.models.last()
        } else {
            None
        }
    }
}
