use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bounds::{bound_rhs, crossover_rhs};
use super::erm::{erm_counts, erm_train, CountTable, HypothesisSpace};
use super::task::{clean_risk, generate_noisy_task, Corruption, LabeledToken, NoisyDataset, NoisySpec};
use crate::error::{Error, Result};
use crate::selection::{select_count, top_n_flags};
use crate::wire;

/// Seed for trial `index` of a run seeded with `seed`; independent of scheduling.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    let mut bytes = [0u8; 16];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..].copy_from_slice(&index.to_le_bytes());
    wire::checksum(&bytes)
}

/// One record per line, for `tokclean report`.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

/// Allowed violation frequency: `δ + 3·sqrt(δ(1−δ)/trials)`.
pub fn violation_allowance(delta: f64, trials: usize) -> f64 {
    delta + 3.0 * (delta * (1.0 - delta) / trials as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTrial {
    pub trial: u64,
    pub seed: u64,
    pub empirical_eta: f64,
    pub risk: f64,
    pub bound: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub m: usize,
    pub delta: f64,
    pub frequency: f64,
    pub allowance: f64,
    pub trials: Vec<BoundTrial>,
}

/// Fraction of trials whose ERM clean risk exceeds the bound at the trial's realized noise rate.
pub fn verify_bound(spec: &NoisySpec, m: usize, delta: f64, trials: usize, seed: u64) -> Result<BoundReport> {
    if trials < 100 {
        return Err(Error::invalid("verify_bound needs at least 100 trials"));
    }
    spec.validate()?;
    bound_rhs(0.0, m as u64, delta)?;
    let records = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let s = child_seed(seed, trial);
            let data = generate_noisy_task(spec, m, s)?;
            let eta = data.empirical_eta();
            let risk = match data.items.is_empty() {
                true => clean_risk(&erm_counts(&CountTable::from_dataset(&data), &HypothesisSpace::AllTables)?, spec),
                false => clean_risk(&erm_train(&data, &HypothesisSpace::AllTables)?, spec),
            };
            let bound = bound_rhs(eta, m as u64, delta)?;
            Ok(BoundTrial {
                trial,
                seed: s,
                empirical_eta: eta,
                risk,
                bound,
                violated: risk > bound,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let frequency = records.iter().filter(|r| r.violated).count() as f64 / trials as f64;
    Ok(BoundReport {
        m,
        delta,
        frequency,
        allowance: violation_allowance(delta, trials),
        trials: records,
    })
}

/// Target noise rate and keep ratio of a simulated cleaner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanerQuality {
    pub eta_hat: f64,
    pub r_hat: f64,
}

/// Per-token actions that realize a [`CleanerQuality`] in expectation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanerPlan {
    /// Probability a clean token is kept.
    pub keep_clean: f64,
    /// Probability a corrupted token is kept as is.
    pub keep_noisy: f64,
    /// Probability a corrupted token is relabeled to its clean token and kept.
    pub repair_noisy: f64,
}

impl CleanerQuality {
    /// Plan hitting `(eta_hat, r_hat)` on data with noise rate `eta`.
    ///
    /// Dropping tokens is enough whenever `r_hat (1 - eta_hat) <= 1 - eta`;
    /// beyond that every clean token is kept and the shortfall comes from
    /// relabeling corrupted ones.
    pub fn plan(&self, eta: f64) -> Result<CleanerPlan> {
        let (eh, r) = (self.eta_hat, self.r_hat);
        if !(r > 0.0 && r <= 1.0) || !(0.0..1.0).contains(&eh) {
            return Err(Error::invalid(format!("cleaner quality ({eh}, {r}) out of range")));
        }
        if eta == 0.0 {
            return match eh == 0.0 {
                true => Ok(CleanerPlan { keep_clean: r, keep_noisy: 0.0, repair_noisy: 0.0 }),
                false => Err(Error::invalid("noise-free data cannot be cleaned to a positive noise rate")),
            };
        }
        let keep_noisy = r * eh / eta;
        if keep_noisy > 1.0 + 1e-12 {
            return Err(Error::invalid(format!(
                "cleaner ({eh}, {r}) is infeasible at noise rate {eta}: it would keep more corrupted tokens than exist"
            )));
        }
        let clean_needed = r * (1.0 - eh);
        let (keep_clean, repair_noisy) = if clean_needed <= 1.0 - eta {
            (clean_needed / (1.0 - eta), 0.0)
        } else {
            (1.0, (clean_needed - (1.0 - eta)) / eta)
        };
        Ok(CleanerPlan {
            keep_clean,
            keep_noisy: keep_noisy.min(1.0),
            repair_noisy: repair_noisy.min(1.0 - keep_noisy.min(1.0)),
        })
    }
}

/// Applies the plan: every token comes back (possibly relabeled) with a kept flag.
fn apply_cleaner(data: &NoisyDataset, spec: &NoisySpec, plan: CleanerPlan, rng: &mut impl Rng) -> Vec<(LabeledToken, bool)> {
    data.items
        .iter()
        .map(|t| {
            let u = rng.random::<f64>();
            if t.clean {
                (*t, u < plan.keep_clean)
            } else if u < plan.keep_noisy {
                (*t, true)
            } else if u < plan.keep_noisy + plan.repair_noisy {
                let fixed = LabeledToken {
                    context: t.context,
                    token: spec.true_map[t.context as usize],
                    clean: true,
                };
                (fixed, true)
            } else {
                (*t, false)
            }
        })
        .collect()
}

fn kept(data: &NoisyDataset, items: impl IntoIterator<Item = LabeledToken>) -> NoisyDataset {
    NoisyDataset {
        items: items.into_iter().collect(),
        ..data.empty_like()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverTrial {
    pub trial: u64,
    pub seed: u64,
    pub full_eta: f64,
    pub cleaned_eta: f64,
    pub kept: usize,
    pub full_risk: f64,
    pub cleaned_risk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverReport {
    pub eta: f64,
    pub eta_hat: f64,
    pub r_hat: f64,
    pub m: usize,
    pub delta: f64,
    /// Noise reduction needed for cleaning to win on the bound.
    pub rhs: f64,
    /// `eta - eta_hat`.
    pub gap: f64,
    pub predicted_win: bool,
    pub mean_full_risk: f64,
    pub mean_cleaned_risk: f64,
    pub mean_kept_fraction: f64,
    pub trials: Vec<CrossoverTrial>,
}

impl CrossoverReport {
    pub fn cleaned_not_worse(&self) -> bool {
        self.mean_cleaned_risk <= self.mean_full_risk
    }
}

/// Trains ERM on full and on cleaned labels of the same draws and compares mean clean risk.
///
/// A cleaned set that keeps nothing leaves every table tied, so the first table is used.
pub fn verify_crossover(
    spec: &NoisySpec,
    cleaner: CleanerQuality,
    m: usize,
    delta: f64,
    trials: usize,
    seed: u64,
) -> Result<CrossoverReport> {
    if trials < 1 {
        return Err(Error::invalid("verify_crossover needs at least one trial"));
    }
    if cleaner.eta_hat > spec.eta {
        return Err(Error::invalid("eta_hat must not exceed eta"));
    }
    spec.validate()?;
    let plan = cleaner.plan(spec.eta)?;
    let rhs = crossover_rhs(m as u64, delta, cleaner.r_hat)?;
    let records = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let s = child_seed(seed, trial);
            let data = generate_noisy_task(spec, m, s)?;
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(s, 1));
            let marked = apply_cleaner(&data, spec, plan, &mut rng);
            let cleaned = kept(&data, marked.into_iter().filter(|(_, k)| *k).map(|(t, _)| t));
            let space = HypothesisSpace::AllTables;
            Ok(CrossoverTrial {
                trial,
                seed: s,
                full_eta: data.empirical_eta(),
                cleaned_eta: cleaned.empirical_eta(),
                kept: cleaned.items.len(),
                full_risk: clean_risk(&erm_counts(&CountTable::from_dataset(&data), &space)?, spec),
                cleaned_risk: clean_risk(&erm_counts(&CountTable::from_dataset(&cleaned), &space)?, spec),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = records.len() as f64;
    let mean = |f: fn(&CrossoverTrial) -> f64| records.iter().fold(0.0, |a, t| a + f(t)) / n;
    let gap = spec.eta - cleaner.eta_hat;
    Ok(CrossoverReport {
        eta: spec.eta,
        eta_hat: cleaner.eta_hat,
        r_hat: cleaner.r_hat,
        m,
        delta,
        rhs,
        gap,
        predicted_win: gap >= rhs,
        mean_full_risk: mean(|t| t.full_risk),
        mean_cleaned_risk: mean(|t| t.cleaned_risk),
        mean_kept_fraction: mean(|t| t.kept as f64) / m.max(1) as f64,
        trials: records,
    })
}

/// Task family the error bound is checked on: 2 to 8 contexts, 2 to 4
/// tokens, both corruption modes, noise rates 0.1, 0.2 and 0.3.
pub fn shipped_bound_specs() -> Vec<NoisySpec> {
    let mut out = Vec::new();
    for eta in [0.1, 0.2, 0.3] {
        out.push(NoisySpec::uniform(2, 2, eta, Corruption::AdversarialFlip).expect("valid preset"));
        out.push(NoisySpec::uniform(4, 3, eta, Corruption::AdversarialFlip).expect("valid preset"));
        out.push(
            NoisySpec::new(
                vec![1, 3, 0, 2, 2, 0, 3, 1],
                4,
                eta,
                Corruption::UniformOther,
                vec![0.25, 0.2, 0.15, 0.12, 0.1, 0.1, 0.05, 0.03],
            )
            .expect("valid preset"),
        );
    }
    out
}

/// Skewed 8-context task for the cleaned-vs-full comparison; the rarest
/// contexts see only a handful of tokens even at M = 10^4.
pub fn crossover_task(eta: f64) -> Result<NoisySpec> {
    NoisySpec::new(
        vec![1, 3, 0, 2, 2, 1, 3, 1],
        4,
        eta,
        Corruption::AdversarialFlip,
        vec![0.3, 0.2, 0.15, 0.15, 0.1, 0.0985, 0.001, 0.0005],
    )
}

/// One data group of the self-evolving simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatthewGroup {
    pub name: String,
    pub task: NoisySpec,
    pub tokens_per_iteration: usize,
    pub cleaner: CleanerQuality,
}

/// Low noise after cleaning and plenty of tokens; skewed contexts leave the
/// rare ones under-learned at warmup.
pub fn rich_group() -> MatthewGroup {
    MatthewGroup {
        name: "rich".into(),
        task: NoisySpec::new(
            vec![3, 1, 2, 0, 3, 2, 1, 0],
            4,
            0.35,
            Corruption::UniformOther,
            vec![0.3, 0.2, 0.15, 0.12, 0.1, 0.07, 0.04, 0.02],
        )
        .expect("valid preset"),
        tokens_per_iteration: 100,
        cleaner: CleanerQuality { eta_hat: 0.05, r_hat: 0.6 },
    }
}

/// Ten tokens per context per round and a cleaner that leaves a majority of flipped labels.
pub fn poor_group() -> MatthewGroup {
    MatthewGroup {
        name: "poor".into(),
        task: NoisySpec::uniform(16, 2, 0.45, Corruption::AdversarialFlip).expect("valid preset"),
        tokens_per_iteration: 160,
        cleaner: CleanerQuality { eta_hat: 0.65, r_hat: 0.5 },
    }
}

/// Cleaning barely reduces noise and few tokens survive.
pub fn intermediate_group() -> MatthewGroup {
    MatthewGroup {
        name: "intermediate".into(),
        task: NoisySpec::uniform(6, 3, 0.3, Corruption::AdversarialFlip).expect("valid preset"),
        tokens_per_iteration: 20,
        cleaner: CleanerQuality { eta_hat: 0.25, r_hat: 0.4 },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatthewRecord {
    pub seed_index: u32,
    pub seed: u64,
    pub group: String,
    pub iteration: u32,
    pub risk: f64,
    pub selected: usize,
    pub selected_eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTrajectory {
    pub name: String,
    /// Mean clean risk after warmup (index 0) and after each iteration.
    pub mean_risk: Vec<f64>,
}

impl GroupTrajectory {
    /// Successive changes of the mean risk.
    pub fn deltas(&self) -> Vec<f64> {
        self.mean_risk.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatthewReport {
    pub iterations: u32,
    pub k_percent: f64,
    pub seeds: u32,
    pub groups: Vec<GroupTrajectory>,
    pub records: Vec<MatthewRecord>,
}

/// Self-evolving loop over a stream mixing every group.
///
/// Warmup trains each group's learner on a full batch. Each iteration draws a
/// fresh batch per group; the group's cleaner marks tokens, marked tokens
/// outrank unmarked ones (random order within each class), global top-k over
/// the pooled batch decides what is kept, and each learner is retrained by ERM
/// on everything it has kept so far. Groups have separate context spaces.
pub fn simulate_matthew(
    groups: &[MatthewGroup],
    iterations: u32,
    k_percent: f64,
    seeds: u32,
    seed: u64,
) -> Result<MatthewReport> {
    if groups.is_empty() {
        return Err(Error::invalid("need at least one group"));
    }
    if iterations < 2 {
        return Err(Error::invalid("need at least two iterations"));
    }
    if seeds < 1 {
        return Err(Error::invalid("need at least one seed"));
    }
    crate::selection::check_k(k_percent)?;
    let plans = groups
        .iter()
        .map(|g| {
            g.task.validate()?;
            g.cleaner.plan(g.task.eta)
        })
        .collect::<Result<Vec<_>>>()?;

    let per_seed = (0..seeds)
        .into_par_iter()
        .map(|si| {
            let s = child_seed(seed, si as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let space = HypothesisSpace::AllTables;
            let mut records = Vec::new();
            let mut counts = Vec::with_capacity(groups.len());
            for g in groups {
                let warm = generate_noisy_task(&g.task, g.tokens_per_iteration, rng.random())?;
                let c = CountTable::from_dataset(&warm);
                records.push(MatthewRecord {
                    seed_index: si,
                    seed: s,
                    group: g.name.clone(),
                    iteration: 0,
                    risk: clean_risk(&erm_counts(&c, &space)?, &g.task),
                    selected: warm.items.len(),
                    selected_eta: warm.empirical_eta(),
                });
                counts.push(c);
            }
            for t in 1..=iterations {
                let batches = groups
                    .iter()
                    .map(|g| generate_noisy_task(&g.task, g.tokens_per_iteration, rng.random()))
                    .collect::<Result<Vec<_>>>()?;
                let mut scores = Vec::new();
                let mut cleaned = Vec::new();
                for ((b, g), p) in batches.iter().zip(groups).zip(&plans) {
                    let marked = apply_cleaner(b, &g.task, *p, &mut rng);
                    for (_, m) in &marked {
                        scores.push(*m as u8 as f64 + rng.random::<f64>());
                    }
                    cleaned.push(marked);
                }
                let keep = top_n_flags(&scores, select_count(k_percent, scores.len()))?;
                let mut offset = 0;
                for (((g, b), c), marked) in groups.iter().zip(&batches).zip(counts.iter_mut()).zip(&cleaned) {
                    let flags = &keep[offset..offset + b.items.len()];
                    offset += b.items.len();
                    let kept = kept(b, marked.iter().zip(flags).filter(|(_, f)| **f).map(|((t, _), _)| *t));
                    c.add_dataset(&kept);
                    records.push(MatthewRecord {
                        seed_index: si,
                        seed: s,
                        group: g.name.clone(),
                        iteration: t,
                        risk: clean_risk(&erm_counts(c, &space)?, &g.task),
                        selected: kept.items.len(),
                        selected_eta: kept.empirical_eta(),
                    });
                }
            }
            Ok(records)
        })
        .collect::<Result<Vec<_>>>()?;

    let records: Vec<MatthewRecord> = per_seed.into_iter().flatten().collect();
    let trajectories = groups
        .iter()
        .map(|g| GroupTrajectory {
            name: g.name.clone(),
            mean_risk: (0..=iterations)
                .map(|t| {
                    let rs: Vec<f64> = records
                        .iter()
                        .filter(|r| r.group == g.name && r.iteration == t)
                        .map(|r| r.risk)
                        .collect();
                    rs.iter().fold(0.0, |a, r| a + r) / rs.len() as f64
                })
                .collect(),
        })
        .collect();
    Ok(MatthewReport {
        iterations,
        k_percent,
        seeds,
        groups: trajectories,
        records,
    })
}
