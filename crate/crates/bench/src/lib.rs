//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use road_core::harness::ExperimentConfig;
use road_core::{BanditState, OfflineDataset, OnlineBuffer, Transition, Window};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Bandit over the default five arms with `periods` recorded rewards.
pub fn bandit(periods: usize, window: usize) -> BanditState {
    let arms = vec![0.1, 0.2, 0.3, 0.4, 0.5];
    let mut state = BanditState::new(arms.clone(), Window::Finite(window), 2.0).unwrap();
    let mut rng = rng(0);
    for _ in 0..periods {
        let m = arms[rng.random_range(0..arms.len())];
        state.record(m, rng.random_range(-1.0..1.0)).unwrap();
    }
    state
}

/// Random chain-like transitions in both sources.
pub fn sources(n_offline: usize, n_online: usize) -> (OfflineDataset, OnlineBuffer) {
    let mut rng = rng(1);
    let mut tr = || {
        let s = rng.random_range(0..9);
        Transition {
            state: s,
            action: rng.random_range(0..2),
            reward: -1.0,
            next_state: s + 1,
            done: false,
        }
    };
    let offline = OfflineDataset::new((0..n_offline).map(|_| tr()).collect(), "bench").unwrap();
    let mut online = OnlineBuffer::new(n_online.max(1)).unwrap();
    (0..n_online).for_each(|_| online.push(tr()));
    (offline, online)
}

/// A short ROAD run on the default chain.
pub fn small_run_config() -> ExperimentConfig {
    ExperimentConfig::from_json(
        r#"{
            "mdp": {"kind": "chain"},
            "offline_data": {"kind": "generate", "policies": [{"policy": {"kind": "constant_action", "action": 0}}], "n_steps": 500},
            "offline_pretrain_steps": 200,
            "online_steps": 500,
            "strategy": {"kind": "road"},
            "eval": {"rollouts": 5, "interval": 100},
            "updates_per_step": 4
        }"#,
    )
    .unwrap()
}
