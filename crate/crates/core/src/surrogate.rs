//! Surrogate bandit reward `R_q = Δ_off − κ·Δ_on`.
//!
//! `Δ` on a batch is the policy's expected value at the batch states minus
//! the value of the batch's own actions, both under the current Q-table.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{OfflineDataset, QTable};
use crate::error::{Error, Result};
use crate::mdp::{Policy, Transition};
use crate::replay::{sample_source, OnlineBuffer, Source};

/// How `E_{a∼π}[q(s,a)]` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionExpectation {
    /// Inner product of the policy row with the Q row.
    Exact,
    /// One action drawn from the policy per batch state.
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub kappa: f64,
    pub batch_size: usize,
    pub action_expectation: ActionExpectation,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            batch_size: 256,
            action_expectation: ActionExpectation::Exact,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::invalid("kappa", "must be finite and nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateStats {
    pub delta_off: f64,
    pub delta_on: f64,
    pub r_q: f64,
}

fn perceived_improvement<R: Rng + ?Sized>(
    q: &QTable,
    policy: &Policy,
    batch: &[Transition],
    mode: ActionExpectation,
    rng: &mut R,
) -> f64 {
    let mut policy_value = 0.0;
    let mut data_value = 0.0;
    for t in batch {
        policy_value += match mode {
            ActionExpectation::Exact => policy
                .row(t.state)
                .iter()
                .zip(q.row(t.state))
                .map(|(p, v)| p * v)
                .sum::<f64>(),
            ActionExpectation::Sampled => q.get(t.state, policy.sample_action(t.state, rng)),
        };
        data_value += q.get(t.state, t.action);
    }
    let n = batch.len() as f64;
    policy_value / n - data_value / n
}

pub fn compute_rq<R: Rng + ?Sized>(
    q: &QTable,
    policy: &Policy,
    offline_batch: &[Transition],
    online_batch: &[Transition],
    cfg: &SurrogateConfig,
    rng: &mut R,
) -> Result<SurrogateStats> {
    if offline_batch.is_empty() {
        return Err(Error::EmptySource(Source::Offline));
    }
    if online_batch.is_empty() {
        return Err(Error::EmptySource(Source::Online));
    }
    if policy.n_states() != q.n_states() || policy.n_actions() != q.n_actions() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} policy", q.n_states(), q.n_actions()),
            actual: format!("{}x{}", policy.n_states(), policy.n_actions()),
        });
    }
    if let Some(t) = offline_batch
        .iter()
        .chain(online_batch)
        .find(|t| t.state >= q.n_states() || t.action >= q.n_actions())
    {
        return Err(Error::OutOfRange {
            what: "batch state",
            index: t.state,
            bound: q.n_states(),
        });
    }
    let delta_off = perceived_improvement(q, policy, offline_batch, cfg.action_expectation, rng);
    let delta_on = perceived_improvement(q, policy, online_batch, cfg.action_expectation, rng);
    let r_q = delta_off - cfg.kappa * delta_on;
    if !r_q.is_finite() {
        return Err(Error::NonFinite("surrogate reward".into()));
    }
    Ok(SurrogateStats {
        delta_off,
        delta_on,
        r_q,
    })
}

/// Draws one batch from each source and evaluates the surrogate.
pub fn period_reward<R: Rng + ?Sized>(
    q: &QTable,
    policy: &Policy,
    offline: &OfflineDataset,
    online: &OnlineBuffer,
    cfg: &SurrogateConfig,
    rng: &mut R,
) -> Result<SurrogateStats> {
    let off = sample_source(offline, online, Source::Offline, cfg.batch_size, rng)?;
    let on = sample_source(offline, online, Source::Online, cfg.batch_size, rng)?;
    compute_rq(q, policy, &off, &on, cfg, rng)
}
