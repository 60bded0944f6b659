//! The cleaning run as a resumable sequence of stages.
//!
//! Every stage writes its outputs atomically, pins them by digest in the
//! state, and only then advances the phase. A crash mid-stage leaves the
//! previous state in place, so resuming re-executes just that stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::config::{RunConfig, RunMode};
use super::split::split_dataset;
use super::state::{hex_digest, ArtifactRef, IterationSummary, Phase, PipelineState, STATE_FILE, STATE_VERSION};
use super::trainer::{
    load_model, save_model_dir, CommandTrainer, EmbeddedTrainer, Manifest, ModelKind, ModelRef, Trainer,
    MANIFEST_FILE, SNAPSHOT_FILE,
};
use crate::desk_lm::CountModel;
use crate::error::{Error, Result};
use crate::records::{align_mask, Dataset, Provenance, TokenMask};
use crate::scoring::{masked_sft_loss, score_dataset, ScoreTable};
use crate::selection::{select, SelectionConfig};

/// Outcome of one [`Pipeline::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub phase: Phase,
    pub message: String,
}

pub struct Pipeline {
    state: PipelineState,
    state_path: PathBuf,
    trainer: Box<dyn Trainer>,
}

fn trainer_for(config: &RunConfig) -> Box<dyn Trainer> {
    match &config.trainer {
        Some(t) => Box::new(CommandTrainer {
            command: t.command.clone(),
        }),
        None => Box::new(EmbeddedTrainer {
            weight: config.model.weight,
        }),
    }
}

impl Pipeline {
    /// Validates the configuration, splits the data and prepares θ_0.
    ///
    /// Fails before doing any work if the configuration is invalid, the run
    /// directory already holds a state, or there are fewer samples than splits.
    pub fn create(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let state_path = config.output_dir.join(STATE_FILE);
        if state_path.exists() {
            return Err(Error::invalid(format!(
                "{} already exists; resume the run instead",
                state_path.display()
            )));
        }
        let dataset = Dataset::load(&config.records)?;
        let split_plan = match config.mode {
            RunMode::SelfEvolving => Some(split_dataset(&dataset, config.iterations, config.seed)?),
            _ => None,
        };
        std::fs::create_dir_all(&config.output_dir)?;
        let mut pipeline = Pipeline {
            trainer: trainer_for(&config),
            state: PipelineState {
                format_version: STATE_VERSION,
                records_digest: hex_digest(dataset.digest()),
                config,
                phase: Phase::Initialized,
                split_plan,
                models: Vec::new(),
                masks: Vec::new(),
                artifacts: BTreeMap::new(),
                iterations: Vec::new(),
                heldout_loss: None,
            },
            state_path,
        };
        pipeline.pin("records", &pipeline.state.config.records.clone())?;
        if let Some(plan) = pipeline.state.split_plan.clone() {
            for k in 0..plan.num_splits() {
                let path = pipeline.path(&format!("splits/split_{k}.tkcl"));
                dataset.subset(&plan.members(k))?.save(&path)?;
                pipeline.pin(&format!("split.{k}"), &path)?;
            }
        }
        let theta0 = pipeline.prepare_base(&dataset)?;
        pipeline.push_model(theta0)?;
        pipeline.persist()?;
        Ok(pipeline)
    }

    /// Reloads a run, verifying every pinned artifact first.
    pub fn resume(state_path: &Path) -> Result<Self> {
        let state = PipelineState::load(state_path)?;
        state.verify_artifacts()?;
        Ok(Pipeline {
            trainer: trainer_for(&state.config),
            state,
            state_path: state_path.to_path_buf(),
        })
    }

    pub fn state(&self) -> &PipelineState {
        &self.state
    }

    pub fn state_path(&self) -> &Path {
        &self.state_path
    }

    pub fn is_finished(&self) -> bool {
        self.state.phase == Phase::Finished
    }

    /// Runs stages until finished or `max_steps` stages have run.
    pub fn run(&mut self, max_steps: Option<usize>) -> Result<Vec<StepReport>> {
        let mut reports = Vec::new();
        while !self.is_finished() && max_steps.is_none_or(|m| reports.len() < m) {
            reports.push(self.step()?);
        }
        Ok(reports)
    }

    /// Executes the next stage and persists the new state.
    ///
    /// On error the in-memory state is rolled back to the last persisted one.
    pub fn step(&mut self) -> Result<StepReport> {
        let snapshot = self.state.clone();
        let outcome = self.advance().and_then(|message| {
            self.persist()?;
            Ok(message)
        });
        match outcome {
            Ok(message) => Ok(self.report(message)),
            Err(e) => {
                self.state = snapshot;
                Err(e)
            }
        }
    }

    fn advance(&mut self) -> Result<String> {
        let mode = self.state.config.mode;
        let last_iteration = match mode {
            RunMode::SelfEvolving => self.state.config.iterations,
            _ => 1,
        };
        let message = match self.state.phase {
            Phase::Finished => "run already finished".to_string(),
            Phase::Initialized => self.warmup()?,
            Phase::WarmupDone => self.score(1)?,
            Phase::Scored { iteration } if mode == RunMode::ScoreOnly => self.finish(iteration)?,
            Phase::Scored { iteration } => self.select(iteration)?,
            Phase::Selected { iteration } if mode == RunMode::SelectOnly => self.finish(iteration)?,
            Phase::Selected { iteration } => self.train(iteration)?,
            Phase::Trained { iteration } if iteration < last_iteration => self.score(iteration + 1)?,
            Phase::Trained { iteration } => self.finish(iteration)?,
        };
        Ok(message)
    }

    fn report(&self, message: String) -> StepReport {
        StepReport {
            phase: self.state.phase,
            message,
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.state.config.output_dir.join(rel)
    }

    fn persist(&self) -> Result<()> {
        self.state.save(&self.state_path)
    }

    fn pin(&mut self, name: &str, path: &Path) -> Result<()> {
        self.state.artifacts.insert(name.to_string(), ArtifactRef::capture(path)?);
        Ok(())
    }

    fn push_model(&mut self, model: ModelRef) -> Result<()> {
        let i = self.state.models.len();
        self.pin(&format!("model.{i}.manifest"), &model.locator.join(MANIFEST_FILE))?;
        if model.kind == ModelKind::Embedded {
            self.pin(&format!("model.{i}.snapshot"), &model.locator.join(SNAPSHOT_FILE))?;
        }
        self.state.models.push(model);
        Ok(())
    }

    fn external_model(dir: &Path) -> Result<ModelRef> {
        Ok(ModelRef {
            model_id: Manifest::read(dir)?.model_id,
            kind: ModelKind::External,
            locator: dir.to_path_buf(),
        })
    }

    fn prepare_base(&self, dataset: &Dataset) -> Result<ModelRef> {
        let cfg = &self.state.config;
        if let Some(t) = &cfg.trainer {
            return Self::external_model(&t.base_model);
        }
        let m = &cfg.model;
        let model = match (&m.base_model, &m.base_corpus) {
            (Some(path), _) => load_model(path)?,
            (None, Some(path)) => {
                let corpus = Dataset::load(path)?;
                let vocab = corpus.vocab_size().max(dataset.vocab_size());
                CountModel::empty(m.order, m.alpha, vocab)?.add_corpus(&corpus, 1.0)?
            }
            (None, None) => return Err(Error::Config("no base model configured".into())),
        };
        save_model_dir(&model, &self.path("models/theta_0"))
    }

    /// Records file the given iteration works on.
    fn stage_records(&self, iteration: u32) -> PathBuf {
        match self.state.config.mode {
            RunMode::SelfEvolving => self.path(&format!("splits/split_{iteration}.tkcl")),
            _ => self.state.config.records.clone(),
        }
    }

    fn warmup(&mut self) -> Result<String> {
        let theta0 = self.state.models[0].clone();
        let model = match self.state.config.mode {
            RunMode::SelfEvolving => {
                let records = self.stage_records(0);
                let split = Dataset::load(&records)?;
                let mask = TokenMask::all_response(&split, &Provenance::new("warmup"));
                let mask_path = self.path("masks/mask_0.tkmk");
                mask.save(&mask_path)?;
                self.pin("mask.0", &mask_path)?;
                self.state.masks.push("mask.0".into());
                self.trainer
                    .finetune(&theta0, &records, &mask_path, &self.path("models/theta_1"))?
            }
            _ => self.prepare_reference(&theta0)?,
        };
        let id = model.model_id.clone();
        self.push_model(model)?;
        self.state.phase = Phase::WarmupDone;
        Ok(match self.state.config.mode {
            RunMode::SelfEvolving => format!("warmup: theta_1 = {id}"),
            _ => format!("reference model {id}"),
        })
    }

    fn prepare_reference(&self, theta0: &ModelRef) -> Result<ModelRef> {
        let cfg = &self.state.config;
        if let Some(t) = &cfg.trainer {
            let dir = t
                .reference_model
                .as_ref()
                .ok_or_else(|| Error::Config("no reference model configured".into()))?;
            return Self::external_model(dir);
        }
        let m = &cfg.model;
        let model = match (&m.reference_model, &m.reference_corpus) {
            (Some(path), _) => load_model(path)?,
            (None, Some(path)) => {
                let corpus = Dataset::load(path)?;
                let mask = TokenMask::all_response(&corpus, &Provenance::new("reference"));
                load_model(&theta0.locator)?.finetune_on_mask(&corpus, &mask, m.weight)?
            }
            (None, None) => return Err(Error::Config("no reference model configured".into())),
        };
        save_model_dir(&model, &self.path("models/reference"))
    }

    /// (base, reference) model indices for an iteration.
    fn scoring_pair(&self, iteration: u32) -> (usize, usize) {
        match self.state.config.mode {
            RunMode::SelfEvolving => {
                let t = iteration as usize;
                (self.state.config.scoring_base.base_index(t), t)
            }
            _ => (0, 1),
        }
    }

    fn score(&mut self, iteration: u32) -> Result<String> {
        let records = self.stage_records(iteration);
        let dataset = Dataset::load(&records)?;
        let (b, r) = self.scoring_pair(iteration);
        let base = self.state.models[b].clone();
        let reference = self.state.models[r].clone();
        let base_path = self.path(&format!("losses/base_{iteration}.tkll"));
        let ref_path = self.path(&format!("losses/ref_{iteration}.tkll"));
        let base_log = self.trainer.loss_log(&base, &records, &base_path)?;
        let ref_log = self.trainer.loss_log(&reference, &records, &ref_path)?;
        let table = score_dataset(&dataset, &base_log, &ref_log)?;
        let scores_path = self.path(&format!("scores/scores_{iteration}.tksc"));
        table.save(&scores_path)?;
        self.pin(&format!("losses.base.{iteration}"), &base_path)?;
        self.pin(&format!("losses.ref.{iteration}"), &ref_path)?;
        self.pin(&format!("scores.{iteration}"), &scores_path)?;

        self.state.iterations.retain(|s| s.iteration != iteration);
        self.state.iterations.push(IterationSummary {
            iteration,
            samples: dataset.num_samples(),
            tokens_scored: table.len(),
            tokens_selected: None,
            base_model_id: base.model_id.clone(),
            ref_model_id: reference.model_id.clone(),
            trained_model_id: None,
        });
        self.state.phase = Phase::Scored { iteration };
        Ok(format!(
            "iteration {iteration}: scored {} tokens of {} samples (base {}, reference {})",
            table.len(),
            dataset.num_samples(),
            base.model_id,
            reference.model_id
        ))
    }

    fn select(&mut self, iteration: u32) -> Result<String> {
        let cfg = &self.state.config;
        let dataset = Dataset::load(&self.stage_records(iteration))?;
        let table = ScoreTable::load(&self.state.artifact(&format!("scores.{iteration}"))?.path)?;
        let selection = SelectionConfig {
            mode: cfg.selection,
            k_percent: cfg.k_percent,
            seed: Some(cfg.seed.wrapping_add(iteration as u64)),
            engine: cfg.engine()?,
        };
        let mask = select(&dataset, &table, &selection)?;
        let name = format!("mask.{iteration}");
        let path = self.path(&format!("masks/mask_{iteration}.tkmk"));
        mask.save(&path)?;
        self.pin(&name, &path)?;
        self.state.masks.retain(|m| *m != name);
        self.state.masks.push(name);
        let selected = mask.selected_count();
        if let Some(s) = self.state.iterations.iter_mut().find(|s| s.iteration == iteration) {
            s.tokens_selected = Some(selected);
        }
        self.state.phase = Phase::Selected { iteration };
        Ok(format!(
            "iteration {iteration}: selected {selected} of {} tokens",
            table.len()
        ))
    }

    fn train(&mut self, iteration: u32) -> Result<String> {
        let records = self.stage_records(iteration);
        let mask = self.state.artifact(&format!("mask.{iteration}"))?.path.clone();
        // fine-tuning continues from the latest model (fixed mode: from θ_0)
        let (init, out) = match self.state.config.mode {
            RunMode::SelfEvolving => (iteration as usize, format!("models/theta_{}", iteration + 1)),
            _ => (0, "models/cleaned".to_string()),
        };
        let init = self.state.models[init].clone();
        let model = self.trainer.finetune(&init, &records, &mask, &self.path(&out))?;
        let id = model.model_id.clone();
        self.push_model(model)?;
        if let Some(s) = self.state.iterations.iter_mut().find(|s| s.iteration == iteration) {
            s.trained_model_id = Some(id.clone());
        }
        self.state.phase = Phase::Trained { iteration };
        Ok(format!("iteration {iteration}: trained {id}"))
    }

    fn finish(&mut self, iteration: u32) -> Result<String> {
        let mut message = format!("finished after iteration {iteration}");
        if self.state.config.mode == RunMode::SelfEvolving {
            let combined = self.combined_mask()?;
            let path = self.path("masks/combined.tkmk");
            combined.save(&path)?;
            self.pin("mask.combined", &path)?;
            message.push_str(&format!("; {} tokens kept overall", combined.selected_count()));
        }
        let produces_model = matches!(self.state.config.mode, RunMode::SelfEvolving | RunMode::Fixed);
        if let (Some(eval), true) = (self.state.config.eval.clone(), produces_model) {
            let model = self.state.models.last().expect("models present").clone();
            let heldout = Dataset::load(&eval.heldout)?;
            let log = self
                .trainer
                .loss_log(&model, &eval.heldout, &self.path("losses/heldout.tkll"))?;
            let labels = match &eval.heldout_mask {
                Some(p) => {
                    let m = TokenMask::load(p)?;
                    align_mask(&m, &heldout)?;
                    m.labels().to_vec()
                }
                None => heldout.response_labels().to_vec(),
            };
            let losses: Vec<f64> = log.entries().iter().map(|v| *v as f64).collect();
            let loss = masked_sft_loss(
                &losses,
                &labels,
                &heldout.sample_lengths(),
                self.state.config.normalization,
            )?;
            self.state.heldout_loss = Some(loss);
            message.push_str(&format!("; held-out loss {loss:.6}"));
        }
        if let Some(m) = self.state.models.last() {
            message.push_str(&format!("; final model {}", m.model_id));
        }
        self.state.phase = Phase::Finished;
        Ok(message)
    }

    /// Split masks mapped back onto the full record file.
    fn combined_mask(&self) -> Result<TokenMask> {
        let plan = self.state.split_plan.as_ref().expect("self-evolving runs have a plan");
        let dataset = Dataset::load(&self.state.config.records)?;
        let mut labels = vec![false; dataset.total_tokens()];
        for k in 0..plan.num_splits() {
            let mask = TokenMask::load(&self.state.artifact(&format!("mask.{k}"))?.path)?;
            let mut offset = 0;
            for s in plan.members(k) {
                let range = dataset.sample_range(s);
                let len = range.len();
                labels[range].copy_from_slice(&mask.labels()[offset..offset + len]);
                offset += len;
            }
        }
        let cfg = &self.state.config;
        let mut prov = Provenance::new("self-evolving");
        prov.k_percent = Some(cfg.k_percent);
        prov.seed = Some(cfg.seed);
        prov.model_ids = self.state.models.iter().map(|m| m.model_id.clone()).collect();
        Ok(TokenMask::new(labels, &prov, dataset.digest()))
    }
}

/// Runs a configuration to completion, resuming if its run directory already holds a state.
pub fn run_to_completion(config: RunConfig) -> Result<PipelineState> {
    let state_path = config.output_dir.join(STATE_FILE);
    let mut pipeline = if state_path.exists() {
        Pipeline::resume(&state_path)?
    } else {
        Pipeline::create(config)?
    };
    pipeline.run(None)?;
    Ok(pipeline.state)
}
