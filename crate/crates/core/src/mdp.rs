//! Finite tabular MDPs and exact dynamic programming on them.
//!
//! State-action quantities are stored row-major as `s * n_actions + a`;
//! transition probabilities as `(s * n_actions + a) * n_states + s'`.
//!
//! Occupancy measures are normalized, `d(s,a) = (1-γ) Σ_t γ^t Pr(s_t=s, a_t=a)`,
//! so they are probability distributions over state-action pairs.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::QTable;
use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-12;

/// A finite discounted MDP with absorbing zero-reward terminal states.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    initial_dist: Vec<f64>,
    discount: f64,
    terminal: Vec<bool>,
}

/// One environment interaction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub done: bool,
}

/// An episode together with its discounted return.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub discounted_return: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Row-stochastic policy matrix `π(a|s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

/// Normalized discounted state-action occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasure {
    n_states: usize,
    n_actions: usize,
    density: Vec<f64>,
}

fn check_distribution(name: &'static str, row: &[f64]) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::invalid(
            name,
            "entries must be finite and nonnegative",
        ));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::invalid(
            name,
            format!("row sums to {sum}, expected 1"),
        ));
    }
    Ok(())
}

impl Mdp {
    /// Builds and validates an MDP from flat row-major tensors.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial_dist: Vec<f64>,
        discount: f64,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::invalid("n_states/n_actions", "must be positive"));
        }
        let pairs = n_states * n_actions;
        let expect = |name: &str, want: usize, got: usize| -> Result<()> {
            if want != got {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name} of length {want}"),
                    actual: got.to_string(),
                });
            }
            Ok(())
        };
        expect("transition", pairs * n_states, transition.len())?;
        expect("reward", pairs, reward.len())?;
        expect("initial_dist", n_states, initial_dist.len())?;
        expect("terminal", n_states, terminal.len())?;
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::invalid(
                "discount",
                format!("{discount} not in (0,1)"),
            ));
        }
        for row in transition.chunks(n_states) {
            check_distribution("transition", row)?;
        }
        check_distribution("initial_dist", &initial_dist)?;
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("reward".into()));
        }
        for s in (0..n_states).filter(|&s| terminal[s]) {
            for a in 0..n_actions {
                let i = s * n_actions + a;
                if transition[i * n_states + s] != 1.0 || reward[i] != 0.0 {
                    return Err(Error::invalid(
                        "terminal",
                        format!("terminal state {s} must self-loop with reward 0"),
                    ));
                }
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            initial_dist,
            discount,
            terminal,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn terminal_mask(&self) -> &[bool] {
        &self.terminal
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    /// Next-state distribution for `(s, a)`.
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let i = (s * self.n_actions + a) * self.n_states;
        &self.transition[i..i + self.n_states]
    }

    pub(crate) fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.n_states {
            return Err(Error::OutOfRange {
                what: "state",
                index: s,
                bound: self.n_states,
            });
        }
        Ok(())
    }

    pub(crate) fn check_action(&self, a: usize) -> Result<()> {
        if a >= self.n_actions {
            return Err(Error::OutOfRange {
                what: "action",
                index: a,
                bound: self.n_actions,
            });
        }
        Ok(())
    }

    pub(crate) fn check_transition(&self, t: &Transition) -> Result<()> {
        self.check_state(t.state)?;
        self.check_action(t.action)?;
        self.check_state(t.next_state)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&MdpDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpDoc = serde_json::from_str(text)?;
        doc.try_into()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// JSON document layout of an [`Mdp`] (nested arrays).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpDoc {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a]`
    pub reward: Vec<Vec<f64>>,
    pub initial_dist: Vec<f64>,
    pub discount: f64,
    pub terminal: Vec<bool>,
}

impl From<&Mdp> for MdpDoc {
    fn from(m: &Mdp) -> Self {
        let transition = (0..m.n_states)
            .map(|s| {
                (0..m.n_actions)
                    .map(|a| m.transition_row(s, a).to_vec())
                    .collect()
            })
            .collect();
        let reward = m.reward.chunks(m.n_actions).map(<[f64]>::to_vec).collect();
        MdpDoc {
            n_states: m.n_states,
            n_actions: m.n_actions,
            transition,
            reward,
            initial_dist: m.initial_dist.clone(),
            discount: m.discount,
            terminal: m.terminal.clone(),
        }
    }
}

impl TryFrom<MdpDoc> for Mdp {
    type Error = Error;

    fn try_from(doc: MdpDoc) -> Result<Self> {
        let shape_err = |what: &str| Error::ShapeMismatch {
            expected: format!(
                "{what} with {} states x {} actions",
                doc.n_states, doc.n_actions
            ),
            actual: "ragged or mis-sized array".into(),
        };
        if doc.transition.len() != doc.n_states || doc.reward.len() != doc.n_states {
            return Err(shape_err("transition/reward"));
        }
        let mut transition = Vec::with_capacity(doc.n_states * doc.n_actions * doc.n_states);
        for per_state in &doc.transition {
            if per_state.len() != doc.n_actions {
                return Err(shape_err("transition"));
            }
            for row in per_state {
                if row.len() != doc.n_states {
                    return Err(shape_err("transition"));
                }
                transition.extend_from_slice(row);
            }
        }
        let mut reward = Vec::with_capacity(doc.n_states * doc.n_actions);
        for row in &doc.reward {
            if row.len() != doc.n_actions {
                return Err(shape_err("reward"));
            }
            reward.extend_from_slice(row);
        }
        Mdp::new(
            doc.n_states,
            doc.n_actions,
            transition,
            reward,
            doc.initial_dist,
            doc.discount,
            doc.terminal,
        )
    }
}

impl Policy {
    /// Validated policy from a flat `n_states * n_actions` matrix.
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions || n_actions == 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("{n_states}x{n_actions} policy"),
                actual: format!("{} entries", probs.len()),
            });
        }
        for row in probs.chunks(n_actions) {
            check_distribution("policy", row)?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self {
            n_states,
            n_actions,
            probs: vec![p; n_states * n_actions],
        }
    }

    /// Deterministic policy taking `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::OutOfRange {
                    what: "action",
                    index: a,
                    bound: n_actions,
                });
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self {
            n_states: actions.len(),
            n_actions,
            probs,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_index(self.row(s), rng)
    }

    fn check_for(&self, mdp: &Mdp) -> Result<()> {
        if self.n_states != mdp.n_states || self.n_actions != mdp.n_actions {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} policy", mdp.n_states, mdp.n_actions),
                actual: format!("{}x{}", self.n_states, self.n_actions),
            });
        }
        Ok(())
    }
}

impl OccupancyMeasure {
    /// Wraps a density, checking normalization to 1e-10.
    pub fn new(n_states: usize, n_actions: usize, density: Vec<f64>) -> Result<Self> {
        if density.len() != n_states * n_actions {
            return Err(Error::ShapeMismatch {
                expected: format!("{} entries", n_states * n_actions),
                actual: density.len().to_string(),
            });
        }
        if density.iter().any(|d| !d.is_finite() || *d < -1e-12) {
            return Err(Error::invalid(
                "occupancy",
                "entries must be finite and nonnegative",
            ));
        }
        let sum: f64 = density.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::invalid("occupancy", format!("sums to {sum}")));
        }
        Ok(Self {
            n_states,
            n_actions,
            density,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.density[s * self.n_actions + a]
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    /// State marginal `Σ_a d(s,a)`.
    pub fn state_marginal(&self) -> Vec<f64> {
        self.density
            .chunks(self.n_actions)
            .map(|row| row.iter().sum())
            .collect()
    }
}

#[cfg(test)]
impl OccupancyMeasure {
    /// Unnormalized copy, bypassing validation.
    pub(crate) fn scaled_for_test(mut self, k: f64) -> Self {
        self.density.iter_mut().for_each(|d| *d *= k);
        self
    }
}

pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left `u` past the cumulative sum; take the last positive entry
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Deterministic chain: start at cell 0, terminal at `n_cells - 1`.
/// Action 0 advances one cell, action 1 advances two (clamped at the terminal).
pub fn build_chain_mdp(
    n_cells: usize,
    step_reward: f64,
    goal_reward: f64,
    discount: f64,
) -> Result<Mdp> {
    if n_cells < 3 {
        return Err(Error::invalid("n_cells", format!("{n_cells} < 3")));
    }
    let n_actions = 2;
    let goal = n_cells - 1;
    let mut transition = vec![0.0; n_cells * n_actions * n_cells];
    let mut reward = vec![0.0; n_cells * n_actions];
    for s in 0..n_cells {
        for a in 0..n_actions {
            let i = s * n_actions + a;
            let next = if s == goal {
                goal
            } else {
                (s + a + 1).min(goal)
            };
            transition[i * n_cells + next] = 1.0;
            if s != goal {
                reward[i] = if next == goal {
                    goal_reward
                } else {
                    step_reward
                };
            }
        }
    }
    let mut initial_dist = vec![0.0; n_cells];
    initial_dist[0] = 1.0;
    let mut terminal = vec![false; n_cells];
    terminal[goal] = true;
    Mdp::new(
        n_cells,
        n_actions,
        transition,
        reward,
        initial_dist,
        discount,
        terminal,
    )
}

/// Samples one transition. Terminal states yield `(s, 0, done = true)`.
pub fn step<R: Rng + ?Sized>(
    mdp: &Mdp,
    state: usize,
    action: usize,
    rng: &mut R,
) -> Result<Transition> {
    mdp.check_state(state)?;
    mdp.check_action(action)?;
    if mdp.is_terminal(state) {
        return Ok(Transition {
            state,
            action,
            reward: 0.0,
            next_state: state,
            done: true,
        });
    }
    let next_state = sample_index(mdp.transition_row(state, action), rng);
    Ok(Transition {
        state,
        action,
        reward: mdp.reward(state, action),
        next_state,
        done: mdp.is_terminal(next_state),
    })
}

/// Runs one episode from the initial distribution until `done` or `max_steps`.
pub fn rollout<R: Rng + ?Sized>(
    mdp: &Mdp,
    policy: &Policy,
    max_steps: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if max_steps == 0 {
        return Err(Error::invalid("max_steps", "must be at least 1"));
    }
    policy.check_for(mdp)?;
    let mut state = sample_index(mdp.initial_dist(), rng);
    let mut transitions = Vec::new();
    let mut discounted_return = 0.0;
    let mut scale = 1.0;
    for _ in 0..max_steps {
        let action = policy.sample_action(state, rng);
        let t = step(mdp, state, action, rng)?;
        discounted_return += scale * t.reward;
        scale *= mdp.discount();
        transitions.push(t);
        if t.done {
            break;
        }
        state = t.next_state;
    }
    Ok(Trajectory {
        transitions,
        discounted_return,
    })
}

/// `P_π(s, s') = Σ_a π(a|s) p(s'|s,a)` and `r_π(s) = Σ_a π(a|s) r(s,a)`.
fn policy_kernel(mdp: &Mdp, policy: &Policy) -> (DMatrix<f64>, DVector<f64>) {
    let n = mdp.n_states();
    let mut p = DMatrix::zeros(n, n);
    let mut r = DVector::zeros(n);
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            let pi = policy.prob(s, a);
            if pi == 0.0 {
                continue;
            }
            r[s] += pi * mdp.reward(s, a);
            for (s2, &prob) in mdp.transition_row(s, a).iter().enumerate() {
                p[(s, s2)] += pi * prob;
            }
        }
    }
    (p, r)
}

/// Solves `(I - γ P_π) v = rhs`.
pub(crate) fn solve_value(mdp: &Mdp, policy: &Policy, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let (p, _) = policy_kernel(mdp, policy);
    let n = mdp.n_states();
    let a = DMatrix::identity(n, n) - p * mdp.discount();
    a.lu()
        .solve(rhs)
        .ok_or_else(|| Error::Singular("policy evaluation".into()))
}

/// Unnormalized discounted state visitation `μᵀ (I - γ P_π)⁻¹`.
fn state_visitation(mdp: &Mdp, policy: &Policy) -> Result<DVector<f64>> {
    let (p, _) = policy_kernel(mdp, policy);
    let n = mdp.n_states();
    let a = (DMatrix::identity(n, n) - p * mdp.discount()).transpose();
    let mu = DVector::from_column_slice(mdp.initial_dist());
    a.lu()
        .solve(&mu)
        .ok_or_else(|| Error::Singular("state visitation".into()))
}

/// Exact `J(π) = μᵀ (I - γ P_π)⁻¹ r_π`.
pub fn policy_return(mdp: &Mdp, policy: &Policy) -> Result<f64> {
    policy.check_for(mdp)?;
    let (_, r) = policy_kernel(mdp, policy);
    let v = solve_value(mdp, policy, &r)?;
    let mu = DVector::from_column_slice(mdp.initial_dist());
    Ok(mu.dot(&v))
}

/// Exact state value vector `V^π`.
pub fn policy_values(mdp: &Mdp, policy: &Policy) -> Result<Vec<f64>> {
    policy.check_for(mdp)?;
    let (_, r) = policy_kernel(mdp, policy);
    Ok(solve_value(mdp, policy, &r)?.iter().copied().collect())
}

/// Exact normalized discounted occupancy of `policy`.
pub fn exact_occupancy(mdp: &Mdp, policy: &Policy) -> Result<OccupancyMeasure> {
    policy.check_for(mdp)?;
    let x = state_visitation(mdp, policy)?;
    let scale = 1.0 - mdp.discount();
    let na = mdp.n_actions();
    let mut density = vec![0.0; mdp.n_pairs()];
    for s in 0..mdp.n_states() {
        for a in 0..na {
            density[s * na + a] = scale * x[s] * policy.prob(s, a);
        }
    }
    // renormalize away solver rounding; the exact measure sums to 1
    let sum: f64 = density.iter().sum();
    density.iter_mut().for_each(|d| *d /= sum);
    OccupancyMeasure::new(mdp.n_states(), na, density)
}

fn check_q_shape(mdp: &Mdp, q: &QTable) -> Result<()> {
    if q.n_states() != mdp.n_states() || q.n_actions() != mdp.n_actions() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} table", mdp.n_states(), mdp.n_actions()),
            actual: format!("{}x{}", q.n_states(), q.n_actions()),
        });
    }
    Ok(())
}

fn backup_with(mdp: &Mdp, q: &QTable, pick: impl Fn(&[f64]) -> f64) -> QTable {
    let next_value: Vec<f64> = (0..mdp.n_states())
        .map(|s| {
            if mdp.is_terminal(s) {
                0.0
            } else {
                pick(q.row(s))
            }
        })
        .collect();
    let mut out = QTable::zeros(mdp.n_states(), mdp.n_actions());
    for s in (0..mdp.n_states()).filter(|&s| !mdp.is_terminal(s)) {
        for a in 0..mdp.n_actions() {
            let cont: f64 = mdp
                .transition_row(s, a)
                .iter()
                .zip(&next_value)
                .map(|(p, v)| p * v)
                .sum();
            out.set(s, a, mdp.reward(s, a) + mdp.discount() * cont);
        }
    }
    out
}

/// `(Tq)(s,a) = r(s,a) + γ E_{s'}[max_{a'} q(s',a')]`.
///
/// Terminal states have value 0: their rows map to 0 and they contribute no
/// continuation value as successors.
pub fn bellman_backup(mdp: &Mdp, q: &QTable) -> Result<QTable> {
    check_q_shape(mdp, q)?;
    Ok(backup_with(mdp, q, |row| {
        row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }))
}

/// Whether value iteration maximizes or minimizes return.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Maximize,
    Minimize,
}

/// Value iteration from `q ≡ 0` until the sup-norm change is below `tol`.
pub fn value_iteration(mdp: &Mdp, objective: Objective, tol: f64) -> QTable {
    let pick = |row: &[f64]| match objective {
        Objective::Maximize => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Objective::Minimize => row.iter().copied().fold(f64::INFINITY, f64::min),
    };
    let mut q = QTable::zeros(mdp.n_states(), mdp.n_actions());
    loop {
        let next = backup_with(mdp, &q, pick);
        let delta = next.sup_distance(&q);
        q = next;
        if delta <= tol {
            return q;
        }
    }
}

/// Best and worst achievable returns, via value iteration to 1e-12.
pub fn return_bounds(mdp: &Mdp) -> Result<(f64, f64)> {
    let best = value_iteration(mdp, Objective::Maximize, 1e-12);
    let worst = value_iteration(mdp, Objective::Minimize, 1e-12);
    let best_policy = Policy::deterministic(mdp.n_actions(), &best.greedy_actions())?;
    let worst_actions: Vec<usize> = (0..mdp.n_states())
        .map(|s| {
            let row = worst.row(s);
            let mut arg = 0;
            for (a, v) in row.iter().enumerate() {
                if *v < row[arg] {
                    arg = a;
                }
            }
            arg
        })
        .collect();
    let worst_policy = Policy::deterministic(mdp.n_actions(), &worst_actions)?;
    Ok((
        policy_return(mdp, &worst_policy)?,
        policy_return(mdp, &best_policy)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_state(reward: f64) -> Mdp {
        Mdp::new(1, 1, vec![1.0], vec![reward], vec![1.0], 0.9, vec![false]).unwrap()
    }

    #[test]
    fn chain_rejects_bad_arguments() {
        assert!(build_chain_mdp(2, -1.0, 10.0, 0.9).is_err());
        assert!(build_chain_mdp(5, -1.0, 10.0, 1.0).is_err());
        assert!(build_chain_mdp(5, -1.0, 10.0, 0.0).is_err());
    }

    #[test]
    fn chain_three_cells_long_step_reaches_goal() {
        let mdp = build_chain_mdp(3, -1.0, 10.0, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = step(&mdp, 0, 1, &mut rng).unwrap();
        assert_eq!((t.next_state, t.reward, t.done), (2, 10.0, true));
        let always_long = Policy::deterministic(2, &[1, 1, 1]).unwrap();
        let traj = rollout(&mdp, &always_long, 10, &mut rng).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.discounted_return, 10.0);
        assert!((policy_return(&mdp, &always_long).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn terminal_step_self_loops() {
        let mdp = build_chain_mdp(4, -1.0, 10.0, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for a in 0..2 {
            let t = step(&mdp, 3, a, &mut rng).unwrap();
            assert_eq!((t.next_state, t.reward, t.done), (3, 0.0, true));
        }
    }

    #[test]
    fn step_rejects_out_of_range() {
        let mdp = build_chain_mdp(4, -1.0, 10.0, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            step(&mdp, 4, 0, &mut rng),
            Err(Error::OutOfRange { .. })
        ));
        assert!(matches!(
            step(&mdp, 0, 2, &mut rng),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn rollout_rejects_zero_steps() {
        let mdp = build_chain_mdp(4, -1.0, 10.0, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(rollout(&mdp, &Policy::uniform(4, 2), 0, &mut rng).is_err());
    }

    #[test]
    fn geometric_series_return() {
        let mdp = single_state(1.0);
        let j = policy_return(&mdp, &Policy::uniform(1, 1)).unwrap();
        assert!((j - 10.0).abs() < 1e-12);
    }

    #[test]
    fn single_state_occupancy_is_policy_row() {
        let mdp = Mdp::new(
            1,
            3,
            vec![1.0; 3],
            vec![0.0, 1.0, 2.0],
            vec![1.0],
            0.7,
            vec![false],
        )
        .unwrap();
        let pi = Policy::new(1, 3, vec![0.2, 0.3, 0.5]).unwrap();
        let d = exact_occupancy(&mdp, &pi).unwrap();
        for a in 0..3 {
            assert!((d.get(0, a) - pi.prob(0, a)).abs() < 1e-14);
        }
    }

    #[test]
    fn invalid_rows_rejected() {
        assert!(Mdp::new(1, 1, vec![0.9], vec![0.0], vec![1.0], 0.9, vec![false]).is_err());
        assert!(Mdp::new(1, 1, vec![1.0], vec![0.0], vec![0.5], 0.9, vec![false]).is_err());
        // terminal state must not pay reward
        assert!(Mdp::new(1, 1, vec![1.0], vec![1.0], vec![1.0], 0.9, vec![true]).is_err());
        assert!(Policy::new(1, 2, vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn zero_q_backs_up_to_reward() {
        let mdp = build_chain_mdp(5, -1.0, 10.0, 0.9).unwrap();
        let tq = bellman_backup(&mdp, &QTable::zeros(5, 2)).unwrap();
        assert_eq!(tq.values(), mdp.rewards());
    }

    #[test]
    fn backup_shape_mismatch() {
        let mdp = build_chain_mdp(5, -1.0, 10.0, 0.9).unwrap();
        assert!(matches!(
            bellman_backup(&mdp, &QTable::zeros(4, 2)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn chain_optimum_fixed_point() {
        let mdp = build_chain_mdp(3, -1.0, 10.0, 0.9).unwrap();
        // hand enumeration: from 1 either action reaches the goal
        let expected = [-1.0 + 0.9 * 10.0, 10.0, 10.0, 10.0, 0.0, 0.0];
        let q = value_iteration(&mdp, Objective::Maximize, 1e-12);
        for (got, want) in q.values().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
        let tq = bellman_backup(&mdp, &q).unwrap();
        assert!(tq.sup_distance(&q) < 1e-12);
    }

    #[test]
    fn default_chain_return_bounds() {
        let mdp = build_chain_mdp(10, -1.0, 10.0, 0.9).unwrap();
        let (worst, best) = return_bounds(&mdp).unwrap();
        // best: four -1 steps then the goal; worst: eight -1 steps then the goal
        let g: f64 = 0.9;
        let best_hand = -(1.0 + g + g * g + g.powi(3)) + 10.0 * g.powi(4);
        let worst_hand = -(0..8).map(|t| g.powi(t)).sum::<f64>() + 10.0 * g.powi(8);
        assert!((best - best_hand).abs() < 1e-9);
        assert!((worst - worst_hand).abs() < 1e-9);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mdp = build_chain_mdp(6, -0.1, 1.0 / 3.0, 0.95).unwrap();
        let text = mdp.to_json().unwrap();
        let back = Mdp::from_json(&text).unwrap();
        assert_eq!(back, mdp);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn json_rejects_unknown_keys() {
        let mdp = build_chain_mdp(3, -1.0, 1.0, 0.9).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&mdp.to_json().unwrap()).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(Mdp::from_json(&v.to_string()).is_err());
    }
}
