//! Several strategies on a shared environment and dataset specification.

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, StrategySpec};
use super::export::{summarize, Spread};
use super::run::{run_experiment, RunRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub strategy: String,
    pub n_seeds: usize,
    pub final_return: Spread,
    pub final_normalized: Option<Spread>,
    /// Highest mean among fixed-ratio rows.
    pub best_fixed: bool,
    /// Highest mean overall.
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, label: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

fn argmax(rows: &[ComparisonRow], keep: impl Fn(usize) -> bool) -> Option<usize> {
    (0..rows.len())
        .filter(|&i| keep(i))
        .fold(None, |best: Option<usize>, i| match best {
            Some(b) if rows[b].final_return.mean >= rows[i].final_return.mean => Some(b),
            _ => Some(i),
        })
}

/// Runs every config and returns the table along with the raw records.
pub fn compare_strategies(cfgs: &[ExperimentConfig]) -> Result<(Comparison, Vec<RunRecord>)> {
    let first = cfgs
        .first()
        .ok_or_else(|| Error::invalid("configs", "need at least one config"))?;
    for c in &cfgs[1..] {
        if c.mdp != first.mdp || c.offline_data != first.offline_data {
            return Err(Error::Config(format!(
                "config '{}' does not share the environment and data spec of '{}'",
                c.label(),
                first.label()
            )));
        }
    }
    let mut records = Vec::new();
    let mut rows = Vec::new();
    let mut fixed = Vec::new();
    for cfg in cfgs {
        let recs = run_experiment(cfg)?;
        let summary = summarize(&recs).remove(0);
        fixed.push(matches!(cfg.strategy, StrategySpec::Fixed { .. }));
        rows.push(ComparisonRow {
            label: summary.label,
            strategy: summary.strategy,
            n_seeds: summary.seeds.len(),
            final_return: summary.final_return,
            final_normalized: summary.final_normalized,
            best_fixed: false,
            best: false,
        });
        records.extend(recs);
    }
    if let Some(i) = argmax(&rows, |i| fixed[i]) {
        rows[i].best_fixed = true;
    }
    if let Some(i) = argmax(&rows, |_| true) {
        rows[i].best = true;
    }
    Ok((Comparison { rows }, records))
}
