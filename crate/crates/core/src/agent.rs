//! Tabular learners: Q-learning, fitted-Q batch updates, policy extraction
//! and offline dataset generation.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{rollout, sample_index, Mdp, Policy, Transition};

/// Dense state-action value table.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn from_values(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", n_states * n_actions),
                actual: values.len().to_string(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("q table".into()));
        }
        Ok(Self {
            n_states,
            n_actions,
            values,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_value(&self, s: usize) -> f64 {
        self.row(s)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Argmax of row `s`; ties go to the lowest action index.
    pub fn greedy_action(&self, s: usize) -> usize {
        let row = self.row(s);
        let mut best = 0;
        for (a, v) in row.iter().enumerate().skip(1) {
            if *v > row[best] {
                best = a;
            }
        }
        best
    }

    pub fn greedy_actions(&self) -> Vec<usize> {
        (0..self.n_states).map(|s| self.greedy_action(s)).collect()
    }

    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Learner hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub learning_rate: f64,
    pub discount: f64,
    /// Softmax inverse temperature used for the soft-greedy policy.
    pub inv_temperature: f64,
    /// Exploration rate of the epsilon-greedy collection policy.
    pub epsilon: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            discount: 0.9,
            inv_temperature: 10.0,
            epsilon: 0.1,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(
                "learning_rate",
                "must be finite and nonnegative",
            ));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::invalid("discount", "must lie in (0,1)"));
        }
        if !(self.inv_temperature > 0.0 && self.inv_temperature.is_finite()) {
            return Err(Error::invalid("inv_temperature", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::invalid("epsilon", "must lie in [0,1]"));
        }
        Ok(())
    }
}

fn td_target(q: &QTable, t: &Transition, discount: f64) -> f64 {
    if t.done {
        t.reward
    } else {
        t.reward + discount * q.max_value(t.next_state)
    }
}

/// One Q-learning step on the entry `(t.state, t.action)`.
pub fn q_learning_update(q: &mut QTable, t: &Transition, cfg: &AgentConfig) -> Result<()> {
    if t.state >= q.n_states() || t.next_state >= q.n_states() || t.action >= q.n_actions() {
        return Err(Error::OutOfRange {
            what: "transition index",
            index: t.state.max(t.next_state),
            bound: q.n_states(),
        });
    }
    let old = q.get(t.state, t.action);
    let new = old + cfg.learning_rate * (td_target(q, t, cfg.discount) - old);
    if !new.is_finite() {
        return Err(Error::NonFinite(format!(
            "q-learning update at ({}, {})",
            t.state, t.action
        )));
    }
    q.set(t.state, t.action, new);
    Ok(())
}

/// Exact fitted-Q step on the pairs present in `batch`: each visited entry
/// becomes the mean of its TD targets under `q_prev`; the rest are copied.
pub fn fqi_batch_update(
    q_prev: &QTable,
    batch: &[Transition],
    cfg: &AgentConfig,
) -> Result<QTable> {
    if batch.is_empty() {
        return Err(Error::invalid("batch", "must be non-empty"));
    }
    let mut sums: HashMap<(usize, usize), (f64, usize)> = HashMap::new();
    for t in batch {
        if t.state >= q_prev.n_states()
            || t.next_state >= q_prev.n_states()
            || t.action >= q_prev.n_actions()
        {
            return Err(Error::OutOfRange {
                what: "transition index",
                index: t.state.max(t.next_state),
                bound: q_prev.n_states(),
            });
        }
        let e = sums.entry((t.state, t.action)).or_insert((0.0, 0));
        e.0 += td_target(q_prev, t, cfg.discount);
        e.1 += 1;
    }
    let mut out = q_prev.clone();
    for ((s, a), (sum, n)) in sums {
        out.set(s, a, sum / n as f64);
    }
    Ok(out)
}

/// Row-wise `π(a|s) ∝ exp(β q(s,a))`.
pub fn softmax_policy(q: &QTable, beta: f64) -> Result<Policy> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid("beta", "must be positive"));
    }
    let mut probs = Vec::with_capacity(q.values().len());
    for s in 0..q.n_states() {
        let row = q.row(s);
        let max = q.max_value(s);
        let start = probs.len();
        probs.extend(row.iter().map(|v| (beta * (v - max)).exp()));
        let z: f64 = probs[start..].iter().sum();
        probs[start..].iter_mut().for_each(|p| *p /= z);
    }
    Policy::new(q.n_states(), q.n_actions(), probs)
}

/// Epsilon-greedy policy; greedy mass is split evenly among tied maxima.
pub fn epsilon_greedy_policy(q: &QTable, epsilon: f64) -> Result<Policy> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::invalid("epsilon", "must lie in [0,1]"));
    }
    let na = q.n_actions();
    let base = epsilon / na as f64;
    let mut probs = Vec::with_capacity(q.values().len());
    for s in 0..q.n_states() {
        let row = q.row(s);
        let max = q.max_value(s);
        let ties = row.iter().filter(|&&v| v == max).count();
        let bonus = (1.0 - epsilon) / ties as f64;
        probs.extend(
            row.iter()
                .map(|&v| if v == max { base + bonus } else { base }),
        );
    }
    Policy::new(q.n_states(), na, probs)
}

/// Greedy deterministic policy (lowest-index ties).
pub fn greedy_policy(q: &QTable) -> Policy {
    Policy::deterministic(q.n_actions(), &q.greedy_actions())
        .expect("greedy actions are in range by construction")
}

/// One weighted component of a behavior mixture.
#[derive(Debug, Clone)]
pub struct BehaviorComponent {
    pub name: String,
    pub policy: Policy,
    pub weight: f64,
}

/// Immutable pretraining transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    transitions: Vec<Transition>,
    behavior_label: String,
    seed: Option<u64>,
}

/// Sidecar metadata written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub behavior_label: String,
    pub seed: Option<u64>,
    pub n_transitions: usize,
}

impl OfflineDataset {
    pub fn new(transitions: Vec<Transition>, behavior_label: impl Into<String>) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::invalid(
                "transitions",
                "offline dataset must be non-empty",
            ));
        }
        Ok(Self {
            transitions,
            behavior_label: behavior_label.into(),
            seed: None,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn behavior_label(&self) -> &str {
        &self.behavior_label
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Checks every index against `mdp`.
    pub fn validate_for(&self, mdp: &Mdp) -> Result<()> {
        self.transitions
            .iter()
            .try_for_each(|t| mdp.check_transition(t))
    }

    /// Writes `<path>` as CSV and `<path>.meta.json` as the sidecar.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        for t in &self.transitions {
            w.serialize(t)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let meta = DatasetMeta {
            behavior_label: self.behavior_label.clone(),
            seed: self.seed,
            n_transitions: self.transitions.len(),
        };
        let meta_path = sidecar_path(path);
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
            .map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path)?;
        let transitions = r.deserialize().collect::<Result<Vec<Transition>, _>>()?;
        let meta_path = sidecar_path(path);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text)?;
        if meta.n_transitions != transitions.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} transitions", meta.n_transitions),
                actual: transitions.len().to_string(),
            });
        }
        let mut ds = Self::new(transitions, meta.behavior_label)?;
        ds.seed = meta.seed;
        Ok(ds)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    name.into()
}

/// Collects `n_steps` transitions, drawing one behavior policy per episode.
pub fn generate_offline_dataset<R: Rng + ?Sized>(
    mdp: &Mdp,
    policies: &[BehaviorComponent],
    n_steps: usize,
    max_episode_steps: usize,
    rng: &mut R,
) -> Result<OfflineDataset> {
    if policies.is_empty() {
        return Err(Error::invalid("policies", "behavior mixture is empty"));
    }
    if n_steps == 0 {
        return Err(Error::invalid("n_steps", "must be positive"));
    }
    let weights: Vec<f64> = policies.iter().map(|c| c.weight).collect();
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("weights", "must be nonnegative"));
    }
    if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("weights", "must sum to 1"));
    }
    let mut transitions = Vec::with_capacity(n_steps);
    while transitions.len() < n_steps {
        let c = &policies[sample_index(&weights, rng)];
        let remaining = n_steps - transitions.len();
        let traj = rollout(mdp, &c.policy, max_episode_steps.min(remaining), rng)?;
        transitions.extend(traj.transitions);
    }
    let label = policies
        .iter()
        .map(|c| format!("{}:{}", c.name, c.weight))
        .collect::<Vec<_>>()
        .join("+");
    OfflineDataset::new(transitions, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{bellman_backup, build_chain_mdp, step};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(lr: f64) -> AgentConfig {
        AgentConfig {
            learning_rate: lr,
            ..AgentConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut q = QTable::from_values(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let before = q.clone();
        let t = Transition {
            state: 0,
            action: 1,
            reward: 5.0,
            next_state: 1,
            done: false,
        };
        q_learning_update(&mut q, &t, &cfg(0.0)).unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn terminal_td_arithmetic() {
        let mut q = QTable::zeros(2, 2);
        let t = Transition {
            state: 0,
            action: 0,
            reward: 1.0,
            next_state: 1,
            done: true,
        };
        q_learning_update(&mut q, &t, &cfg(0.5)).unwrap();
        assert_eq!(q.get(0, 0), 0.5);
        assert_eq!(q.values().iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn non_finite_update_fails() {
        let mut q = QTable::zeros(2, 1);
        let t = Transition {
            state: 0,
            action: 0,
            reward: f64::MAX,
            next_state: 1,
            done: true,
        };
        let huge = AgentConfig {
            learning_rate: 10.0,
            ..AgentConfig::default()
        };
        assert!(matches!(
            q_learning_update(&mut q, &t, &huge),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn full_coverage_fqi_matches_backup() {
        let mdp = build_chain_mdp(6, -1.0, 10.0, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q_prev = QTable::from_values(
            6,
            2,
            (0..12)
                .map(|i| {
                    if i >= 10 {
                        0.0
                    } else {
                        (i as f64 * 0.37).sin()
                    }
                })
                .collect(),
        )
        .unwrap();
        let batch: Vec<Transition> = (0..6)
            .flat_map(|s| (0..2).map(move |a| (s, a)))
            .map(|(s, a)| step(&mdp, s, a, &mut rng).unwrap())
            .collect();
        let c = AgentConfig {
            discount: 0.9,
            ..AgentConfig::default()
        };
        let fqi = fqi_batch_update(&q_prev, &batch, &c).unwrap();
        assert_eq!(fqi, bellman_backup(&mdp, &q_prev).unwrap());
        // duplicating the deterministic batch changes nothing
        let doubled: Vec<_> = batch.iter().chain(batch.iter()).copied().collect();
        assert_eq!(fqi_batch_update(&q_prev, &doubled, &c).unwrap(), fqi);
    }

    #[test]
    fn fqi_averages_stochastic_targets() {
        let q_prev = QTable::from_values(3, 1, vec![0.0, 2.0, 4.0]).unwrap();
        let c = AgentConfig {
            discount: 0.5,
            ..AgentConfig::default()
        };
        let batch = [
            Transition {
                state: 0,
                action: 0,
                reward: 1.0,
                next_state: 1,
                done: false,
            },
            Transition {
                state: 0,
                action: 0,
                reward: 1.0,
                next_state: 2,
                done: false,
            },
        ];
        let out = fqi_batch_update(&q_prev, &batch, &c).unwrap();
        // (1 + 0.5*2 + 1 + 0.5*4) / 2
        assert_eq!(out.get(0, 0), 2.5);
        assert_eq!(out.get(1, 0), 2.0);
        assert!(fqi_batch_update(&q_prev, &[], &c).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let q = QTable::from_values(2, 2, vec![3.0, 3.0, 1.0, 0.0]).unwrap();
        let pi = softmax_policy(&q, 10.0).unwrap();
        assert_eq!(pi.row(0), &[0.5, 0.5]);
        let sigma = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((pi.prob(1, 0) - sigma).abs() < 1e-15);
        assert!((pi.prob(1, 1) - (1.0 - sigma)).abs() < 1e-15);
        assert!(softmax_policy(&q, 0.0).is_err());
    }

    #[test]
    fn epsilon_greedy_cases() {
        let q = QTable::from_values(2, 3, vec![1.0, 5.0, 2.0, 4.0, 4.0, 0.0]).unwrap();
        let greedy = epsilon_greedy_policy(&q, 0.0).unwrap();
        assert_eq!(greedy.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(greedy.row(1), &[0.5, 0.5, 0.0]);
        let uniform = epsilon_greedy_policy(&q, 1.0).unwrap();
        assert!(uniform
            .probs()
            .iter()
            .all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        let mixed = epsilon_greedy_policy(&q, 0.3).unwrap();
        assert!((mixed.prob(0, 1) - (0.7 + 0.1)).abs() < 1e-15);
        assert_eq!(q.greedy_action(1), 0);
    }

    #[test]
    fn dataset_generation_counts_and_label() {
        let mdp = build_chain_mdp(10, -1.0, 10.0, 0.9).unwrap();
        let sub = Policy::deterministic(2, &[0; 10]).unwrap();
        let opt = Policy::deterministic(2, &[1; 10]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let low = generate_offline_dataset(
            &mdp,
            &[BehaviorComponent {
                name: "suboptimal".into(),
                policy: sub.clone(),
                weight: 1.0,
            }],
            1000,
            100,
            &mut rng,
        )
        .unwrap();
        assert_eq!(low.len(), 1000);
        assert!(low.transitions().iter().all(|t| t.action == 0));
        assert_eq!(low.behavior_label(), "suboptimal:1");
        let blend = generate_offline_dataset(
            &mdp,
            &[
                BehaviorComponent {
                    name: "suboptimal".into(),
                    policy: sub,
                    weight: 0.5,
                },
                BehaviorComponent {
                    name: "optimal".into(),
                    policy: opt,
                    weight: 0.5,
                },
            ],
            1000,
            100,
            &mut rng,
        )
        .unwrap();
        assert_eq!(blend.len(), 1000);
        assert!(blend.transitions().iter().any(|t| t.action == 1));
        assert!(blend.transitions().iter().any(|t| t.action == 0));
        assert!(generate_offline_dataset(&mdp, &[], 10, 10, &mut rng).is_err());
    }

    #[test]
    fn dataset_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let ds = OfflineDataset::new(
            vec![
                Transition {
                    state: 0,
                    action: 1,
                    reward: -0.1,
                    next_state: 2,
                    done: false,
                },
                Transition {
                    state: 2,
                    action: 0,
                    reward: 10.0,
                    next_state: 3,
                    done: true,
                },
            ],
            "x:1",
        )
        .unwrap()
        .with_seed(42);
        ds.save_csv(&path).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("state,action,reward,next_state,done\n"));
        assert_eq!(OfflineDataset::load_csv(&path).unwrap(), ds);
    }

    proptest! {
        #[test]
        fn softmax_rows_normalized(vals in prop::collection::vec(-1e6f64..1e6, 12), beta in 1e-3f64..1e3) {
            let q = QTable::from_values(4, 3, vals).unwrap();
            let pi = softmax_policy(&q, beta).unwrap();
            for s in 0..4 {
                let sum: f64 = pi.row(s).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_shift_invariant(vals in prop::collection::vec(-10f64..10.0, 4), shift in -100f64..100.0) {
            let q = QTable::from_values(1, 4, vals.clone()).unwrap();
            let shifted = QTable::from_values(1, 4, vals.iter().map(|v| v + shift).collect()).unwrap();
            let a = softmax_policy(&q, 1.5).unwrap();
            let b = softmax_policy(&shifted, 1.5).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn q_update_touches_one_entry(vals in prop::collection::vec(-5f64..5.0, 6), s in 0usize..3, a in 0usize..2, s2 in 0usize..3, r in -1f64..1.0) {
            let mut q = QTable::from_values(3, 2, vals).unwrap();
            let before = q.clone();
            let t = Transition { state: s, action: a, reward: r, next_state: s2, done: false };
            q_learning_update(&mut q, &t, &cfg(0.1)).unwrap();
            for i in 0..6 {
                if i != s * 2 + a {
                    prop_assert_eq!(q.values()[i], before.values()[i]);
                }
            }
        }
    }
}
