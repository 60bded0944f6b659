//! Fixed-model and self-evolving cleaning runs over the embedded or an external trainer.
//!
//! Self-evolving runs split the data into `T + 1` parts. Split 0 warms the base
//! model up on all response tokens; every later split is scored against the
//! latest model, cleaned by global top-k, and used to fine-tune that model.
//! Fixed-model runs score the whole dataset once with a given model pair.

mod config;
mod pipeline;
mod split;
mod state;
mod sweep;
mod trainer;

pub use config::{EngineKind, EvalConfig, ModelConfig, RunConfig, RunMode, ScoringBase, TrainerConfig};
pub use pipeline::{run_to_completion, Pipeline, StepReport};
pub use split::{split_dataset, SplitPlan};
pub use state::{hex_digest, ArtifactRef, IterationSummary, Phase, PipelineState, STATE_FILE};
pub use sweep::{run_sweep, SweepResult};
pub use trainer::{
    load_model, save_model_dir, CommandTrainer, EmbeddedTrainer, Manifest, ModelKind, ModelRef, Trainer,
    MANIFEST_FILE, SNAPSHOT_FILE,
};
