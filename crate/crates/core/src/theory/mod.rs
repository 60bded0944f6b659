//! Simulation lab for the noisy-label error bounds behind token cleaning.
//!
//! Tasks have a unique clean next token per context and label noise at rate
//! η. Learners are brute-force empirical risk minimizers over lookup tables
//! under 0-1 loss, and clean risk is computed in closed form. Logs in the
//! bounds are natural logs.

mod bounds;
mod erm;
mod simulate;
mod task;

pub use bounds::{bound_rhs, crossover_rhs, quantity_term};
pub use erm::{erm_counts, erm_train, CountTable, HypothesisSpace, MAX_HYPOTHESES};
pub use simulate::{
    child_seed, crossover_task, intermediate_group, poor_group, rich_group, shipped_bound_specs, simulate_matthew, to_jsonl, verify_bound,
    verify_crossover, violation_allowance, BoundReport, BoundTrial, CleanerPlan, CleanerQuality, CrossoverReport,
    CrossoverTrial, GroupTrajectory, MatthewGroup, MatthewRecord, MatthewReport,
};
pub use task::{clean_risk, generate_noisy_task, Corruption, Hypothesis, LabeledToken, NoisyDataset, NoisySpec};
