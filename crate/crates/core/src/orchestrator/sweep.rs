use std::fmt::Write as _;

use super::config::RunConfig;
use super::pipeline::run_to_completion;
use crate::error::{Error, Result};
use crate::wire;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// `(k_percent, held-out loss)` in ascending k.
    pub rows: Vec<(f64, f64)>,
    pub warnings: Vec<String>,
}

impl SweepResult {
    /// The k with the lowest held-out loss (first on ties).
    pub fn best(&self) -> Option<(f64, f64)> {
        self.rows
            .iter()
            .copied()
            .fold(None, |best: Option<(f64, f64)>, row| match best {
                Some(b) if b.1 <= row.1 => Some(b),
                _ => Some(row),
            })
    }

    pub fn table(&self) -> String {
        let mut out = String::from("k_percent  heldout_loss\n");
        for (k, loss) in &self.rows {
            let _ = writeln!(out, "{k:>9}  {loss:.6}");
        }
        out
    }

    /// Tab-separated `k<TAB>loss` lines with a header, for plotting.
    pub fn plot_data(&self) -> String {
        let mut out = String::from("k_percent\theldout_loss\n");
        for (k, loss) in &self.rows {
            let _ = writeln!(out, "{k}\t{loss}");
        }
        out
    }
}

/// Runs `config` once per k (each in its own sub-directory) and collects held-out losses.
pub fn run_sweep(config: &RunConfig, k_list: &[f64]) -> Result<SweepResult> {
    if k_list.len() < 2 {
        return Err(Error::invalid("a sweep needs at least two k values"));
    }
    let mut ks = k_list.to_vec();
    ks.sort_by(f64::total_cmp);
    let before = ks.len();
    ks.dedup();
    let mut warnings = Vec::new();
    if ks.len() < before {
        warnings.push(format!("removed {} duplicate k value(s)", before - ks.len()));
    }
    if ks.len() < 2 {
        return Err(Error::invalid("a sweep needs at least two distinct k values"));
    }
    if config.eval.is_none() {
        return Err(Error::Config("a sweep needs an [eval] section".into()));
    }
    for k in &ks {
        if !(*k > 0.0 && *k <= 100.0) {
            return Err(Error::invalid(format!("k_percent {k} outside (0, 100]")));
        }
    }
    let mut rows = Vec::with_capacity(ks.len());
    for k in ks {
        let mut cfg = config.clone();
        cfg.k_percent = k;
        cfg.run_name = format!("{}-k{k}", config.run_name);
        cfg.output_dir = config.output_dir.join(format!("k_{k}"));
        let state = run_to_completion(cfg)?;
        rows.push((k, state.heldout_loss.expect("eval configured")));
    }
    let result = SweepResult { rows, warnings };
    wire::write_atomic(&config.output_dir.join("sweep_table.txt"), result.table().as_bytes())?;
    wire::write_atomic(&config.output_dir.join("sweep_plot.tsv"), result.plot_data().as_bytes())?;
    Ok(result)
}
