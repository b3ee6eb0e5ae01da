//! Offline pretraining followed by online fine-tuning under a mixing strategy.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, PeriodSpec};
use crate::agent::{
    epsilon_greedy_policy, generate_offline_dataset, greedy_policy, q_learning_update,
    softmax_policy, OfflineDataset, QTable,
};
use crate::error::{Error, Result};
use crate::mdp::{exact_occupancy, return_bounds, rollout, sample_index, step, Mdp};
use crate::replay::{
    sample_mixed, sample_source, sample_weighted, DirectiveContext, MixingDirective, OnlineBuffer,
    Source, Strategy, TaggedTransition,
};
use crate::surrogate::period_reward;

const TRAIN_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRow {
    /// 1-based period index.
    pub period: usize,
    pub start_step: usize,
    pub end_step: usize,
    /// `None` for weight-based directives.
    pub selected_m: Option<f64>,
    pub delta_off: f64,
    pub delta_on: f64,
    pub r_q: f64,
    pub offline_fraction: f64,
    pub samples: usize,
    /// Most recent evaluation at period end.
    pub eval_return: f64,
    /// UCB score per arm when the directive was issued (`None` = unpulled).
    #[serde(default)]
    pub ucb: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub strategy: String,
    pub seed: u64,
    /// Bandit arms, for ROAD runs.
    #[serde(default)]
    pub arms: Vec<f64>,
    pub periods: Vec<PeriodRow>,
    pub evals: Vec<EvalPoint>,
    /// Mean of the trailing evaluations.
    pub final_return: f64,
    /// `final_return` mapped to [0,100] between worst and best policy returns.
    pub final_normalized: Option<f64>,
    pub worst_return: f64,
    pub best_return: f64,
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn normalize(&self, value: f64) -> Option<f64> {
        let span = self.best_return - self.worst_return;
        (span > 0.0).then(|| 100.0 * (value - self.worst_return) / span)
    }
}

struct Shared {
    mdp: Mdp,
    dataset: Option<OfflineDataset>,
    bounds: (f64, f64),
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let mdp = cfg.mdp.build()?;
    let dataset = cfg.offline_data.load()?;
    if let Some(ds) = &dataset {
        ds.validate_for(&mdp)?;
    }
    let shared = Shared {
        bounds: return_bounds(&mdp)?,
        mdp,
        dataset,
    };
    cfg.seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, &shared, seed))
        .collect()
}

/// A single seed, sequentially.
pub fn run_single(cfg: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    cfg.validate()?;
    let mdp = cfg.mdp.build()?;
    let shared = Shared {
        bounds: return_bounds(&mdp)?,
        dataset: cfg.offline_data.load()?,
        mdp,
    };
    run_seed(cfg, &shared, seed)
}

fn evaluate(mdp: &Mdp, q: &QTable, cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let pi = greedy_policy(q);
    let mut total = 0.0;
    for _ in 0..cfg.eval.rollouts {
        total += rollout(mdp, &pi, cfg.eval.max_steps, rng)?.discounted_return;
    }
    Ok(total / cfg.eval.rollouts as f64)
}

fn ensure_finite(q: &QTable, step: usize) -> Result<()> {
    if let Some(i) = q.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "Q entry (state {}, action {}) at online step {step}",
            i / q.n_actions(),
            i % q.n_actions()
        )));
    }
    Ok(())
}

fn draw_batch<R: Rng + ?Sized>(
    directive: &MixingDirective,
    offline: &OfflineDataset,
    online: &OnlineBuffer,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<TaggedTransition>> {
    match directive {
        MixingDirective::Ratio(m) => sample_mixed(offline, online, *m, batch_size, rng),
        MixingDirective::Weights(w) => sample_weighted(offline, online, w, batch_size, rng),
    }
}

fn run_seed(cfg: &ExperimentConfig, shared: &Shared, seed: u64) -> Result<RunRecord> {
    let started = Instant::now();
    let mdp = &shared.mdp;
    let mut rng = stream(seed, TRAIN_STREAM);
    let mut eval_rng = stream(seed, EVAL_STREAM);
    let generated;
    let offline = match &shared.dataset {
        Some(ds) => ds,
        None => {
            let (behaviors, n_steps) = match &cfg.offline_data {
                super::config::OfflineDataSpec::Generate { n_steps, .. } => {
                    (cfg.offline_data.behaviors(mdp)?, *n_steps)
                }
                super::config::OfflineDataSpec::File { .. } => unreachable!("loaded up front"),
            };
            let mut data_rng = stream(seed, DATA_STREAM);
            generated = generate_offline_dataset(
                mdp,
                &behaviors,
                n_steps,
                cfg.max_episode_steps,
                &mut data_rng,
            )?
            .with_seed(seed);
            &generated
        }
    };
    let agent = cfg.agent;
    let mut q = QTable::zeros(mdp.n_states(), mdp.n_actions());
    let empty = OnlineBuffer::new(1)?;
    for _ in 0..cfg.offline_pretrain_steps {
        for t in sample_source(
            offline,
            &empty,
            Source::Offline,
            cfg.train_batch_size,
            &mut rng,
        )? {
            q_learning_update(&mut q, &t, &agent)?;
        }
    }
    ensure_finite(&q, 0)?;

    let mut strategy: Strategy = cfg.build_strategy()?;
    let decreasing_clamp = match &strategy {
        Strategy::Decreasing { total_periods, .. } => Some(*total_periods),
        _ => None,
    };
    let mut buffer = OnlineBuffer::new(cfg.online_steps)?;
    let mut evals = vec![EvalPoint {
        step: 0,
        mean_return: evaluate(mdp, &q, cfg, &mut eval_rng)?,
    }];
    let mut periods = Vec::new();
    let mut state = sample_index(mdp.initial_dist(), &mut rng);
    let mut episode_len = 0;
    let mut global = 0;
    while global < cfg.online_steps {
        let index = periods.len();
        let directive_period = decreasing_clamp.map_or(index, |n| index.min(n - 1));
        let occupancy = match strategy {
            Strategy::BalancedReplay { .. } => Some(exact_occupancy(
                mdp,
                &epsilon_greedy_policy(&q, agent.epsilon)?,
            )?),
            _ => None,
        };
        let ucb = strategy
            .bandit()
            .map(|b| {
                b.ucb_values()
                    .into_iter()
                    .map(|v| v.is_finite().then_some(v))
                    .collect()
            })
            .unwrap_or_default();
        let directive = strategy.next_directive(
            directive_period,
            DirectiveContext {
                offline,
                online: &buffer,
                occupancy: occupancy.as_ref(),
            },
            &mut rng,
        )?;
        let start_step = global;
        let mut offline_samples = 0;
        let mut samples = 0;
        loop {
            let behavior = epsilon_greedy_policy(&q, agent.epsilon)?;
            let action = behavior.sample_action(state, &mut rng);
            let t = step(mdp, state, action, &mut rng)?;
            buffer.push(t);
            global += 1;
            episode_len += 1;
            for _ in 0..cfg.updates_per_step {
                let batch =
                    draw_batch(&directive, offline, &buffer, cfg.train_batch_size, &mut rng)?;
                for tagged in &batch {
                    if tagged.source == Source::Offline {
                        offline_samples += 1;
                    }
                    q_learning_update(&mut q, &tagged.transition, &agent)?;
                }
                samples += batch.len();
            }
            ensure_finite(&q, global)?;
            if global % cfg.eval.interval == 0 || global == cfg.online_steps {
                evals.push(EvalPoint {
                    step: global,
                    mean_return: evaluate(mdp, &q, cfg, &mut eval_rng)?,
                });
            }
            let episode_over = t.done || episode_len >= cfg.max_episode_steps;
            if episode_over {
                state = sample_index(mdp.initial_dist(), &mut rng);
                episode_len = 0;
            } else {
                state = t.next_state;
            }
            let period_over = match cfg.period {
                PeriodSpec::Episode => episode_over,
                PeriodSpec::Steps(n) => global - start_step >= n,
            };
            if period_over || global == cfg.online_steps {
                break;
            }
        }
        let soft = softmax_policy(&q, agent.inv_temperature)?;
        let stats = period_reward(&q, &soft, offline, &buffer, &cfg.surrogate, &mut rng)?;
        strategy.record(&directive, stats.r_q)?;
        periods.push(PeriodRow {
            period: index + 1,
            start_step,
            end_step: global,
            selected_m: directive.ratio(),
            delta_off: stats.delta_off,
            delta_on: stats.delta_on,
            r_q: stats.r_q,
            offline_fraction: offline_samples as f64 / samples as f64,
            samples,
            eval_return: evals.last().map_or(f64::NAN, |e| e.mean_return),
            ucb,
        });
    }

    let tail = cfg.eval.final_window.min(evals.len());
    let final_return = evals[evals.len() - tail..]
        .iter()
        .map(|e| e.mean_return)
        .sum::<f64>()
        / tail as f64;
    let mut record = RunRecord {
        label: cfg.label(),
        strategy: strategy.name(),
        seed,
        arms: strategy
            .bandit()
            .map(|b| b.arms().to_vec())
            .unwrap_or_default(),
        periods,
        evals,
        final_return,
        final_normalized: None,
        worst_return: shared.bounds.0,
        best_return: shared.bounds.1,
        wall_time_secs: 0.0,
    };
    record.final_normalized = record.normalize(final_return);
    record.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(strategy: &str, extra: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{
                "mdp": {{"kind": "chain"}},
                "offline_data": {{"kind": "generate", "policies": [{{"policy": {{"kind": "constant_action", "action": 0}}}}], "n_steps": 200}},
                "offline_pretrain_steps": 20,
                "online_steps": 120,
                "strategy": {strategy},
                "eval": {{"rollouts": 2, "interval": 40}},
                "surrogate": {{"batch_size": 16}},
                "train_batch_size": 8
                {extra}
            }}"#
        ))
        .unwrap()
    }

    #[test]
    fn periods_cover_online_steps() {
        let cfg = config(r#"{"kind": "road"}"#, "");
        let rec = run_single(&cfg, 3).unwrap();
        assert_eq!(rec.periods.first().unwrap().start_step, 0);
        assert_eq!(rec.periods.last().unwrap().end_step, 120);
        for w in rec.periods.windows(2) {
            assert_eq!(w[0].end_step, w[1].start_step);
            assert_eq!(w[0].period + 1, w[1].period);
        }
        assert_eq!(rec.evals.len(), 4);
        assert_eq!(rec.arms, crate::bandit::DEFAULT_ARMS.to_vec());
    }

    #[test]
    fn fixed_step_periods() {
        let cfg = config(
            r#"{"kind": "fixed", "ratio": 0.3}"#,
            r#", "period": {"steps": 25}"#,
        );
        let rec = run_single(&cfg, 0).unwrap();
        let lens: Vec<usize> = rec
            .periods
            .iter()
            .map(|p| p.end_step - p.start_step)
            .collect();
        assert_eq!(lens, vec![25, 25, 25, 25, 20]);
        assert!(rec.periods.iter().all(|p| p.selected_m == Some(0.3)));
    }

    #[test]
    fn extreme_ratios_use_one_source() {
        for (m, frac) in [(0.0, 0.0), (1.0, 1.0)] {
            let cfg = config(&format!(r#"{{"kind": "fixed", "ratio": {m}}}"#), "");
            let rec = run_single(&cfg, 1).unwrap();
            assert!(rec.periods.iter().all(|p| p.offline_fraction == frac));
        }
    }

    #[test]
    fn balanced_replay_runs() {
        let cfg = config(r#"{"kind": "balanced_replay"}"#, "");
        let rec = run_single(&cfg, 2).unwrap();
        assert!(rec.periods.iter().all(|p| p.selected_m.is_none()));
    }

    #[test]
    fn decreasing_with_explicit_count_clamps() {
        let cfg = config(r#"{"kind": "decreasing", "total_periods": 3}"#, "");
        let rec = run_single(&cfg, 2).unwrap();
        let ms: Vec<f64> = rec.periods.iter().filter_map(|p| p.selected_m).collect();
        assert_eq!(&ms[..3], &[0.5, 0.3, 0.1]);
        assert!(ms[3..].iter().all(|m| *m == 0.1));
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = config(r#"{"kind": "road"}"#, r#", "seeds": [5, 6]"#);
        let mut a = run_experiment(&cfg).unwrap();
        let mut b = run_experiment(&cfg).unwrap();
        for r in a.iter_mut().chain(b.iter_mut()) {
            r.wall_time_secs = 0.0;
        }
        assert_eq!(a, b);
        assert_eq!(a[0].seed, 5);
        assert_ne!(a[0].periods, a[1].periods);
    }

    #[test]
    fn zero_pretraining_is_allowed() {
        let cfg = config(r#"{"kind": "road"}"#, "");
        let mut cfg = cfg;
        cfg.offline_pretrain_steps = 0;
        cfg.bandit.arms = vec![0.1, 0.3, 0.5, 0.7, 0.9];
        let rec = run_single(&cfg, 0).unwrap();
        assert!((rec.evals[0].mean_return - rec.worst_return).abs() < 1e-9);
    }
}
