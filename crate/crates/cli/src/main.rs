use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tokclean_core::desk_lm::CountModel;
use tokclean_core::orchestrator::{
    load_model, run_sweep, save_model_dir, split_dataset, Pipeline, RunConfig, RunMode, StepReport,
};
use tokclean_core::records::{Dataset, LossLog, TokenMask};
use tokclean_core::report::{render, summarize_trials, DetokTable, ReportFormat};
use tokclean_core::scoring::{score_dataset, ScoreTable};
use tokclean_core::selection::{select, Engine, SelectionConfig, SelectionMode};
use tokclean_core::synth::{generate, write_bundle, SynthSpec};
use tokclean_core::theory::{
    crossover_task, intermediate_group, poor_group, rich_group, shipped_bound_specs, simulate_matthew, to_jsonl,
    verify_bound, verify_crossover, BoundReport, CleanerQuality, Corruption, NoisySpec,
};
use tokclean_core::{wire, ErrorClass};

#[derive(Parser)]
#[command(name = "tokclean", version, about = "Token-level cleaning of fine-tuning data")]
struct Cli {
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "TOKCLEAN_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score response tokens from a base and a reference loss log.
    Score {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        base_log: PathBuf,
        #[arg(long)]
        ref_log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn scores into a token mask.
    Select(SelectArgs),
    /// Partition records into a warmup split and T cleaning splits.
    Split {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        iterations: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Start a cleaning run from a config file.
    Run(RunArgs),
    /// Continue an interrupted run.
    Resume {
        /// State file of the run (or its output directory).
        #[arg(long)]
        state: PathBuf,
        /// Stop after this many stages.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Run the configured pipeline once per k and tabulate held-out loss.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated k percentages.
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<f64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Noisy-label simulations.
    Simulate {
        #[command(subcommand)]
        which: Simulation,
    },
    /// Render selected tokens, or summarize simulation trials.
    Report(ReportArgs),
    /// Write the bundled synthetic corpus and a ready-to-run config.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Desk count-model trainer speaking the external trainer contract.
    DeskTrain(DeskTrainArgs),
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    records: PathBuf,
    /// Score file (not needed for uniform-random).
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    k: f64,
    #[arg(long, default_value = "global")]
    mode: String,
    #[arg(long)]
    seed: Option<u64>,
    /// exact or streaming.
    #[arg(long, default_value = "exact")]
    engine: String,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// fixed, self-evolving, score-only or select-only.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    iterations: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Stop after this many stages (resume later).
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Subcommand)]
enum Simulation {
    /// Violation frequency of the full-token error bound.
    Bound {
        /// Run every shipped task at M = 100 and 1000.
        #[arg(long)]
        shipped: bool,
        #[arg(long, default_value_t = 4)]
        contexts: u32,
        #[arg(long, default_value_t = 3)]
        tokens: u32,
        #[arg(long, default_value_t = 0.2)]
        eta: f64,
        /// uniform-other or adversarial-flip.
        #[arg(long, default_value = "uniform-other")]
        corruption: String,
        #[arg(long, default_value_t = 1000)]
        m: usize,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trial records, one JSON object per line.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cleaned versus full-token learning at a given cleaner quality.
    Crossover {
        #[arg(long, default_value_t = 0.3)]
        eta: f64,
        #[arg(long)]
        eta_hat: f64,
        #[arg(long)]
        r_hat: f64,
        #[arg(long, default_value_t = 10_000)]
        m: usize,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated cleaning on rich, poor and intermediate groups.
    Matthew {
        /// Comma-separated group presets.
        #[arg(long, value_delimiter = ',', default_value = "rich,poor,intermediate")]
        groups: Vec<String>,
        #[arg(long, default_value_t = 4)]
        iterations: u32,
        #[arg(long, default_value_t = 50.0)]
        k: f64,
        #[arg(long, default_value_t = 20)]
        seeds: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, required_unless_present = "trials")]
    records: Option<PathBuf>,
    #[arg(long, required_unless_present = "trials")]
    mask: Option<PathBuf>,
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Token display table, `id<TAB>text` per line.
    #[arg(long)]
    detok: Option<PathBuf>,
    /// ansi, plain or html.
    #[arg(long, default_value = "ansi")]
    format: String,
    /// Summarize a trial file from `simulate` instead.
    #[arg(long, conflicts_with_all = ["records", "mask"])]
    trials: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DeskTrainArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Model directory or snapshot; without it a fresh model is trained on every token of the records.
    #[arg(long)]
    init_model: Option<PathBuf>,
    #[arg(long)]
    out_model: Option<PathBuf>,
    #[arg(long)]
    out_losslog: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    weight: f64,
    #[arg(long, default_value_t = 2)]
    order: u32,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Vocabulary size of a fresh model (defaults to the records').
    #[arg(long)]
    vocab_size: Option<u32>,
}

fn invalid(msg: impl Into<String>) -> tokclean_core::Error {
    tokclean_core::Error::InvalidArgument(msg.into())
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => wire::write_atomic(p, text.as_bytes())?,
        None => {
            use std::io::Write;
            // a closed pipe (e.g. `| head`) is not an error
            match std::io::stdout().lock().write_all(text.as_bytes()) {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                r => r?,
            }
        }
    }
    Ok(())
}

fn print_steps(steps: &[StepReport]) {
    for s in steps {
        println!("{}", s.message);
    }
}

fn print_finish(p: &Pipeline) {
    let state = p.state();
    for it in &state.iterations {
        let selected = it.tokens_selected.map_or("-".to_string(), |n| n.to_string());
        let trained = it.trained_model_id.as_deref().unwrap_or("-");
        println!(
            "iteration {}: {} samples, {} scored, {} selected, base {} ref {} -> {}",
            it.iteration, it.samples, it.tokens_scored, selected, it.base_model_id, it.ref_model_id, trained
        );
    }
    if p.is_finished() {
        println!("phase finished; state {}", p.state_path().display());
    } else {
        println!("paused at {:?}; resume with --state {}", state.phase, p.state_path().display());
    }
}

fn cmd_select(a: SelectArgs) -> Result<()> {
    let dataset = Dataset::load(&a.records)?;
    let mode: SelectionMode = a.mode.parse()?;
    let engine = match a.engine.as_str() {
        "exact" => Engine::Exact,
        "streaming" => Engine::Streaming {
            epsilon: a.epsilon.ok_or_else(|| invalid("streaming engine needs --epsilon"))?,
        },
        other => bail!(invalid(format!("unknown engine {other:?}"))),
    };
    let config = SelectionConfig {
        mode,
        k_percent: a.k,
        seed: a.seed,
        engine,
    };
    config.validate()?;
    let table = match (&a.scores, mode) {
        (Some(p), _) => ScoreTable::load(p)?,
        (None, SelectionMode::UniformRandom) => placeholder_table(&dataset),
        (None, _) => bail!(invalid(format!("{mode} selection needs --scores"))),
    };
    let mask = select(&dataset, &table, &config)?;
    mask.save(&a.out)?;
    println!("selected {} of {} response tokens", mask.selected_count(), dataset.eligible_count());
    Ok(())
}

// uniform-random ignores score values, but `select` still checks alignment
fn placeholder_table(dataset: &Dataset) -> ScoreTable {
    let zeros = vec![0.0; dataset.total_tokens()];
    let log = LossLog::from_f64("none", dataset.digest(), &zeros).expect("finite zeros");
    score_dataset(dataset, &log, &log).expect("aligned by construction")
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(m) = a.mode {
        cfg.mode = serde_json::from_value::<RunMode>(json!(m))
            .map_err(|_| invalid(format!("unknown mode {m:?}")))?;
    }
    if let Some(k) = a.k {
        cfg.k_percent = k;
    }
    if let Some(t) = a.iterations {
        cfg.iterations = t;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = a.output_dir {
        cfg.output_dir = d;
    }
    let mut p = Pipeline::create(cfg)?;
    print_steps(&p.run(a.max_steps)?);
    print_finish(&p);
    Ok(())
}

fn cmd_resume(state: &Path, max_steps: Option<usize>) -> Result<()> {
    let path = if state.is_dir() {
        state.join(tokclean_core::orchestrator::STATE_FILE)
    } else {
        state.to_path_buf()
    };
    let mut p = Pipeline::resume(&path)?;
    print_steps(&p.run(max_steps)?);
    print_finish(&p);
    Ok(())
}

fn corruption(s: &str) -> Result<Corruption> {
    Ok(serde_json::from_value(json!(s))
        .map_err(|_| invalid(format!("unknown corruption {s:?}")))?)
}

fn bound_summary(spec: &NoisySpec, r: &BoundReport) -> serde_json::Value {
    json!({
        "contexts": spec.contexts,
        "tokens": spec.tokens,
        "eta": spec.eta,
        "m": r.m,
        "delta": r.delta,
        "trials": r.trials.len(),
        "frequency": r.frequency,
        "allowance": r.allowance,
        "within_allowance": r.frequency <= r.allowance,
    })
}

fn cmd_simulate(which: Simulation) -> Result<()> {
    match which {
        Simulation::Bound {
            shipped,
            contexts,
            tokens,
            eta,
            corruption: c,
            m,
            delta,
            trials,
            seed,
            out,
        } => {
            let mut runs = Vec::new();
            if shipped {
                for spec in shipped_bound_specs() {
                    for m in [100, 1000] {
                        runs.push((spec.clone(), m));
                    }
                }
            } else {
                runs.push((NoisySpec::uniform(contexts, tokens, eta, corruption(&c)?)?, m));
            }
            let mut lines = String::new();
            for (i, (spec, m)) in runs.iter().enumerate() {
                let seed = if shipped { tokclean_core::theory::child_seed(seed, i as u64) } else { seed };
                let r = verify_bound(spec, *m, delta, trials, seed)?;
                lines.push_str(&to_jsonl(&r.trials));
                println!("{}", bound_summary(spec, &r));
            }
            wire::write_atomic(&out, lines.as_bytes())?;
        }
        Simulation::Crossover {
            eta,
            eta_hat,
            r_hat,
            m,
            delta,
            trials,
            seed,
            out,
        } => {
            let spec = crossover_task(eta)?;
            let r = verify_crossover(&spec, CleanerQuality { eta_hat, r_hat }, m, delta, trials, seed)?;
            wire::write_atomic(&out, to_jsonl(&r.trials).as_bytes())?;
            println!(
                "{}",
                json!({
                    "eta": r.eta, "eta_hat": r.eta_hat, "r_hat": r.r_hat, "m": r.m, "delta": r.delta,
                    "rhs": r.rhs, "gap": r.gap, "predicted_win": r.predicted_win,
                    "mean_full_risk": r.mean_full_risk, "mean_cleaned_risk": r.mean_cleaned_risk,
                    "mean_kept_fraction": r.mean_kept_fraction, "trials": r.trials.len(),
                })
            );
        }
        Simulation::Matthew {
            groups,
            iterations,
            k,
            seeds,
            seed,
            out,
        } => {
            let presets = groups
                .iter()
                .map(|g| match g.as_str() {
                    "rich" => Ok(rich_group()),
                    "poor" => Ok(poor_group()),
                    "intermediate" => Ok(intermediate_group()),
                    other => Err(invalid(format!("unknown group {other:?}"))),
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let r = simulate_matthew(&presets, iterations, k, seeds, seed)?;
            wire::write_atomic(&out, to_jsonl(&r.records).as_bytes())?;
            for g in &r.groups {
                println!("{}", json!({ "group": g.name, "mean_risk": g.mean_risk, "deltas": g.deltas() }));
            }
        }
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    if let Some(t) = &a.trials {
        let text = std::fs::read_to_string(t).with_context(|| format!("reading {}", t.display()))?;
        return write_out(a.out.as_deref(), &summarize_trials(&text)?);
    }
    let format: ReportFormat = a.format.parse()?;
    let dataset = Dataset::load(a.records.as_deref().expect("required by clap"))?;
    let mask = TokenMask::load(a.mask.as_deref().expect("required by clap"))?;
    let scores = a.scores.as_deref().map(ScoreTable::load).transpose()?;
    let detok = a.detok.as_deref().map(DetokTable::load).transpose()?;
    let text = render(&dataset, &mask, scores.as_ref(), detok.as_ref(), format)?;
    write_out(a.out.as_deref(), &text)
}

fn cmd_desk_train(a: DeskTrainArgs) -> Result<()> {
    if a.out_model.is_none() && a.out_losslog.is_none() {
        bail!(invalid("nothing to do: give --out-model and/or --out-losslog"));
    }
    let dataset = Dataset::load(&a.records)?;
    let mut model = match &a.init_model {
        Some(p) => load_model(p)?,
        None => {
            let vocab = a.vocab_size.unwrap_or(dataset.vocab_size());
            CountModel::empty(a.order, a.alpha, vocab)?.add_corpus(&dataset, 1.0)?
        }
    };
    if let Some(dir) = &a.out_model {
        if let (Some(mask), Some(_)) = (&a.mask, &a.init_model) {
            model = model.finetune_on_mask(&dataset, &TokenMask::load(mask)?, a.weight)?;
        } else if a.mask.is_some() {
            bail!(invalid("--mask needs --init-model"));
        }
        let r = save_model_dir(&model, dir)?;
        println!("model {}", r.model_id);
    }
    if let Some(path) = &a.out_losslog {
        model.token_losses(&dataset)?.save(path)?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Score {
            records,
            base_log,
            ref_log,
            out,
        } => {
            let dataset = Dataset::load(&records)?;
            let table = score_dataset(&dataset, &LossLog::load(&base_log)?, &LossLog::load(&ref_log)?)?;
            table.save(&out)?;
            println!("scored {} response tokens", table.len());
        }
        Command::Select(a) => cmd_select(a)?,
        Command::Split {
            records,
            iterations,
            seed,
            out_dir,
        } => {
            let dataset = Dataset::load(&records)?;
            let plan = split_dataset(&dataset, iterations, seed)?;
            std::fs::create_dir_all(&out_dir)?;
            for k in 0..plan.num_splits() {
                dataset.subset(&plan.members(k))?.save(&out_dir.join(format!("split_{k}.tkcl")))?;
            }
            wire::write_atomic(&out_dir.join("plan.json"), serde_json::to_string_pretty(&plan)?.as_bytes())?;
            println!("split sizes {:?}", plan.sizes());
        }
        Command::Run(a) => cmd_run(a)?,
        Command::Resume { state, max_steps } => cmd_resume(&state, max_steps)?,
        Command::Sweep { config, k, output_dir } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            let r = run_sweep(&cfg, &k)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", r.table());
            if let Some((k, loss)) = r.best() {
                println!("best k {k} (held-out loss {loss:.6})");
            }
        }
        Command::Simulate { which } => cmd_simulate(which)?,
        Command::Report(a) => cmd_report(a)?,
        Command::Synth { out_dir, seed } => {
            let corpus = generate(&SynthSpec::default(), seed)?;
            let b = write_bundle(&corpus, &out_dir, seed)?;
            println!("wrote {}", b.config.display());
        }
        Command::DeskTrain(a) => cmd_desk_train(a)?,
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<tokclean_core::Error>().map(|e| e.class()) {
        Some(ErrorClass::Validation) => 2,
        Some(ErrorClass::Alignment) => 3,
        Some(ErrorClass::Trainer) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
