//! Trainers the pipeline can drive: the embedded count model, or any external
//! program honouring the command contract.
//!
//! Contract for external programs:
//!
//! ```text
//! fine-tune:  <cmd> --records R --mask M --init-model LOC --out-model DIR
//! loss log:   <cmd> --records R --init-model LOC --out-losslog PATH
//! ```
//!
//! Exit status 0 means success. A fine-tune writes `DIR/manifest.json`
//! containing at least `{"model_id": "..."}`; a loss-log call writes a TKLL
//! file whose model id must match the model it was asked to evaluate.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::desk_lm::CountModel;
use crate::error::{Error, Result};
use crate::records::{Dataset, LossLog, TokenMask};
use crate::wire;

pub const MANIFEST_FILE: &str = "manifest.json";
/// File name of the snapshot inside an embedded model directory.
pub const SNAPSHOT_FILE: &str = "model.tkng";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Embedded,
    External,
}

/// A model snapshot on disk and the id it reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRef {
    pub model_id: String,
    pub kind: ModelKind,
    /// Model directory (holds the manifest).
    pub locator: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model_id: String,
    #[serde(default)]
    pub format: Option<String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Trainer(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Trainer(format!("bad manifest {}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        wire::write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }
}

/// Writes an embedded model directory: snapshot plus manifest.
pub fn save_model_dir(model: &CountModel, dir: &Path) -> Result<ModelRef> {
    std::fs::create_dir_all(dir)?;
    model.save(&dir.join(SNAPSHOT_FILE))?;
    Manifest {
        model_id: model.model_id().to_string(),
        format: Some("tkng".into()),
    }
    .write(dir)?;
    Ok(ModelRef {
        model_id: model.model_id().to_string(),
        kind: ModelKind::Embedded,
        locator: dir.to_path_buf(),
    })
}

/// Loads an embedded model from a directory (or a bare snapshot file) and checks its id.
pub fn load_model(locator: &Path) -> Result<CountModel> {
    let file = if locator.is_dir() {
        locator.join(SNAPSHOT_FILE)
    } else {
        locator.to_path_buf()
    };
    let model = CountModel::load(&file)?;
    if locator.is_dir() {
        if let Ok(m) = Manifest::read(locator) {
            if m.model_id != model.model_id() {
                return Err(Error::Artifact {
                    name: "model manifest".into(),
                    path: locator.join(MANIFEST_FILE),
                    reason: format!("manifest says {} but snapshot is {}", m.model_id, model.model_id()),
                });
            }
        }
    }
    Ok(model)
}

pub trait Trainer {
    /// Fine-tunes `init` on the tokens of `records` selected by `mask`, writing the result to `out_dir`.
    fn finetune(&self, init: &ModelRef, records: &Path, mask: &Path, out_dir: &Path) -> Result<ModelRef>;

    /// Writes and returns the per-token loss log of `model` over `records`.
    fn loss_log(&self, model: &ModelRef, records: &Path, out: &Path) -> Result<LossLog>;
}

/// Runs the desk count model in-process.
#[derive(Debug, Clone)]
pub struct EmbeddedTrainer {
    pub weight: f64,
}

impl Trainer for EmbeddedTrainer {
    fn finetune(&self, init: &ModelRef, records: &Path, mask: &Path, out_dir: &Path) -> Result<ModelRef> {
        let model = load_model(&init.locator)?;
        let dataset = Dataset::load(records)?;
        let mask = TokenMask::load(mask)?;
        let tuned = model.finetune_on_mask(&dataset, &mask, self.weight)?;
        save_model_dir(&tuned, out_dir)
    }

    fn loss_log(&self, model: &ModelRef, records: &Path, out: &Path) -> Result<LossLog> {
        let m = load_model(&model.locator)?;
        let log = m.token_losses(&Dataset::load(records)?)?;
        log.save(out)?;
        Ok(log)
    }
}

/// Spawns an external program per stage.
#[derive(Debug, Clone)]
pub struct CommandTrainer {
    pub command: Vec<String>,
}

impl CommandTrainer {
    fn run(&self, args: &[(&str, &Path)]) -> Result<()> {
        let (program, lead) = self
            .command
            .split_first()
            .ok_or_else(|| Error::Trainer("empty trainer command".into()))?;
        let mut cmd = Command::new(program);
        cmd.args(lead);
        for (flag, value) in args {
            cmd.arg(flag).arg(value);
        }
        let out = cmd
            .output()
            .map_err(|e| Error::Trainer(format!("cannot start {program}: {e}")))?;
        if !out.status.success() {
            return Err(Error::Trainer(format!(
                "{program} exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(())
    }
}

impl Trainer for CommandTrainer {
    fn finetune(&self, init: &ModelRef, records: &Path, mask: &Path, out_dir: &Path) -> Result<ModelRef> {
        std::fs::create_dir_all(out_dir)?;
        self.run(&[
            ("--records", records),
            ("--mask", mask),
            ("--init-model", &init.locator),
            ("--out-model", out_dir),
        ])?;
        let manifest = Manifest::read(out_dir)?;
        Ok(ModelRef {
            model_id: manifest.model_id,
            kind: ModelKind::External,
            locator: out_dir.to_path_buf(),
        })
    }

    fn loss_log(&self, model: &ModelRef, records: &Path, out: &Path) -> Result<LossLog> {
        if let Some(dir) = out.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.run(&[
            ("--records", records),
            ("--init-model", &model.locator),
            ("--out-losslog", out),
        ])?;
        let log = LossLog::load(out)?;
        if log.model_id() != model.model_id {
            return Err(Error::Trainer(format!(
                "loss log reports model {} but {} was requested",
                log.model_id(),
                model.model_id
            )));
        }
        Ok(log)
    }
}
