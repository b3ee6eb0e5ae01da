//! Monte Carlo and closed-form oracles for the exact computations.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use road_core::agent::softmax_policy;
use road_core::mdp::{build_chain_mdp, exact_occupancy, policy_return, return_bounds, rollout};
use road_core::nalgebra::DMatrix;
use road_core::surrogate::{compute_rq, ActionExpectation};
use road_core::theory::{bias_monte_carlo, snr_prediction, NoiseModel};
use road_core::{Policy, QTable, SurrogateConfig, Transition};

fn discounted_sum(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

#[test]
fn chain_returns_match_path_enumeration() {
    let mdp = build_chain_mdp(10, -1.0, 10.0, 0.9).unwrap();
    // 0→2→4→6→8→9 and 0→1→…→9
    let fast = discounted_sum(&[-1.0, -1.0, -1.0, -1.0, 10.0], 0.9);
    let mut slow_path = vec![-1.0; 8];
    slow_path.push(10.0);
    let slow = discounted_sum(&slow_path, 0.9);
    assert!((fast - 3.122).abs() < 1e-12);
    assert!((slow - (-1.390_6)).abs() < 1e-4);

    let twos = Policy::deterministic(2, &vec![1; mdp.n_states()]).unwrap();
    let ones = Policy::deterministic(2, &vec![0; mdp.n_states()]).unwrap();
    assert!((policy_return(&mdp, &twos).unwrap() - fast).abs() < 1e-12);
    assert!((policy_return(&mdp, &ones).unwrap() - slow).abs() < 1e-12);
    let (worst, best) = return_bounds(&mdp).unwrap();
    assert!((best - fast).abs() < 1e-9, "{best} vs {fast}");
    assert!(worst <= slow + 1e-9);
}

#[test]
fn occupancy_matches_rollout_frequencies() {
    let mdp = build_chain_mdp(6, -1.0, 10.0, 0.8).unwrap();
    let na = mdp.n_actions();
    let probs: Vec<f64> = (0..mdp.n_states())
        .flat_map(|s| {
            let p = 0.2 + 0.1 * s as f64;
            [p, 1.0 - p]
        })
        .collect();
    let pi = Policy::new(mdp.n_states(), na, probs).unwrap();
    let exact = exact_occupancy(&mdp, &pi).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let episodes = 100_000;
    let gamma = mdp.discount();
    let mut est = vec![0.0; mdp.n_pairs()];
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let traj = rollout(&mdp, &pi, 200, &mut rng).unwrap();
        let mut w = 1.0 - gamma;
        for t in &traj.transitions {
            est[t.state * na + t.action] += w;
            w *= gamma;
        }
        returns.push(traj.discounted_return);
    }
    for s in (0..mdp.n_states()).filter(|&s| !mdp.is_terminal(s)) {
        for a in 0..na {
            let mc = est[s * na + a] / episodes as f64;
            assert!(
                (mc - exact.get(s, a)).abs() < 3e-3,
                "d({s},{a}): mc {mc} vs exact {}",
                exact.get(s, a)
            );
        }
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let sd = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let exact_j = policy_return(&mdp, &pi).unwrap();
    assert!(
        (mean - exact_j).abs() < 4.0 * sd / n.sqrt(),
        "{mean} vs {exact_j}"
    );
}

#[test]
fn sampled_surrogate_is_unbiased_for_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (ns, na) = (5, 3);
    let values: Vec<f64> = (0..ns * na).map(|_| rng.random_range(-2.0..2.0)).collect();
    let q = QTable::from_values(ns, na, values).unwrap();
    let pi = softmax_policy(&q, 1.5).unwrap();
    let batch = |rng: &mut ChaCha8Rng| -> Vec<Transition> {
        (0..32)
            .map(|_| {
                let s = rng.random_range(0..ns);
                Transition {
                    state: s,
                    action: rng.random_range(0..na),
                    reward: 0.0,
                    next_state: s,
                    done: false,
                }
            })
            .collect()
    };
    let (off, on) = (batch(&mut rng), batch(&mut rng));
    let exact_cfg = SurrogateConfig {
        kappa: 0.7,
        ..SurrogateConfig::default()
    };
    let sampled_cfg = SurrogateConfig {
        action_expectation: ActionExpectation::Sampled,
        ..exact_cfg
    };
    let exact = compute_rq(&q, &pi, &off, &on, &exact_cfg, &mut rng)
        .unwrap()
        .r_q;
    let draws: Vec<f64> = (0..20_000)
        .map(|_| {
            compute_rq(&q, &pi, &off, &on, &sampled_cfg, &mut rng)
                .unwrap()
                .r_q
        })
        .collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(
        (mean - exact).abs() < 4.0 * sd / n.sqrt(),
        "{mean} vs {exact}"
    );
}

#[test]
fn smooth_signal_rough_noise_snr_within_factor_two() {
    let n = 400;
    let h = 2.0 * PI / n as f64;
    let x: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();
    let f: Vec<f64> = x.iter().map(|x| x.sin()).collect();
    let noise = NoiseModel::new(
        DMatrix::from_fn(n, n, |i, j| 0.5 * (10.0 * (x[i] - x[j])).cos()),
        1.0,
    )
    .unwrap();
    let mut base: Vec<f64> = x
        .iter()
        .map(|x| (-0.5 * ((x - PI / 4.0) / 0.03).powi(2)).exp())
        .collect();
    let z: f64 = base.iter().sum();
    base.iter_mut().for_each(|p| *p /= z);

    let predicted = snr_prediction(&f, &noise, h).unwrap();
    assert!((predicted - 100.0).abs() < 1.0, "prediction {predicted}");
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let report = bias_monte_carlo(&f, &noise, &base, 0.01, 100_000, &mut rng).unwrap();
    let ratio = report.snr / predicted;
    assert!(
        (0.5..=2.0).contains(&ratio),
        "snr {} vs predicted {predicted}",
        report.snr
    );
}
