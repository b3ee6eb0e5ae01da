//! Sliding-window UCB over a discrete set of mixing ratios.
//!
//! At period `k` (1-based: `k = completed periods + 1`) the selected arm is
//!
//! ```text
//! argmax_m  mean_m + sqrt(c · ln(min(k, τ)) / N_k(τ, m))
//! ```
//!
//! where means and counts cover only the last `τ` recorded periods. Arms
//! with no pulls inside the window score `+∞`; ties go to the lowest index.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default candidate ratios.
pub const DEFAULT_ARMS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const DEFAULT_EXPLORATION: f64 = 2.0;
pub const DEFAULT_WINDOW: usize = 1000;

/// Sliding-window length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Finite(usize),
    /// Keeps the whole history (`τ = k`).
    Growing,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmStats {
    /// `None` when the arm has no pulls inside the window.
    pub mean: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditState {
    arms: Vec<f64>,
    window: Window,
    exploration: f64,
    history: VecDeque<(usize, f64)>,
    completed: u64,
}

impl BanditState {
    pub fn new(arms: Vec<f64>, window: Window, exploration: f64) -> Result<Self> {
        if arms.is_empty() {
            return Err(Error::invalid("arms", "candidate set is empty"));
        }
        if arms.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::invalid("arms", "ratios must lie in [0,1]"));
        }
        if window == Window::Finite(0) {
            return Err(Error::invalid("window", "must be positive"));
        }
        if !(exploration >= 0.0 && exploration.is_finite()) {
            return Err(Error::invalid(
                "exploration",
                "must be finite and nonnegative",
            ));
        }
        Ok(Self {
            arms,
            window,
            exploration,
            history: VecDeque::new(),
            completed: 0,
        })
    }

    pub fn arms(&self) -> &[f64] {
        &self.arms
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn exploration(&self) -> f64 {
        self.exploration
    }

    /// Retained `(arm index, reward)` pairs, oldest first.
    pub fn history(&self) -> impl Iterator<Item = &(usize, f64)> {
        self.history.iter()
    }

    /// Current period index `k` (1-based).
    pub fn period(&self) -> u64 {
        self.completed + 1
    }

    fn effective_horizon(&self) -> u64 {
        match self.window {
            Window::Finite(tau) => self.period().min(tau as u64),
            Window::Growing => self.period(),
        }
    }

    pub fn arm_index(&self, arm: f64) -> Option<usize> {
        self.arms.iter().position(|&m| m == arm)
    }

    pub fn window_means(&self) -> Vec<ArmStats> {
        let mut sums = vec![0.0; self.arms.len()];
        let mut counts = vec![0usize; self.arms.len()];
        for &(i, r) in &self.history {
            sums[i] += r;
            counts[i] += 1;
        }
        sums.into_iter()
            .zip(counts)
            .map(|(sum, count)| ArmStats {
                mean: (count > 0).then(|| sum / count as f64),
                count,
            })
            .collect()
    }

    /// UCB score per arm; `+∞` for arms without pulls in the window.
    pub fn ucb_values(&self) -> Vec<f64> {
        let log_k = (self.effective_horizon() as f64).ln();
        self.window_means()
            .into_iter()
            .map(|st| match st.mean {
                None => f64::INFINITY,
                Some(mean) => mean + (self.exploration * log_k / st.count as f64).sqrt(),
            })
            .collect()
    }

    pub fn select_index(&self) -> usize {
        let ucb = self.ucb_values();
        let mut best = 0;
        for (i, v) in ucb.iter().enumerate().skip(1) {
            if *v > ucb[best] {
                best = i;
            }
        }
        best
    }

    /// The ratio to use for the coming period. Does not mutate state.
    pub fn select_arm(&self) -> Result<f64> {
        if self.arms.is_empty() {
            return Err(Error::invalid("arms", "candidate set is empty"));
        }
        Ok(self.arms[self.select_index()])
    }

    /// Records the reward observed for `arm` and closes the period.
    pub fn record(&mut self, arm: f64, reward: f64) -> Result<()> {
        let i = self
            .arm_index(arm)
            .ok_or_else(|| Error::invalid("arm", format!("{arm} is not a candidate ratio")))?;
        if !reward.is_finite() {
            return Err(Error::NonFinite("bandit reward".into()));
        }
        self.history.push_back((i, reward));
        if let Window::Finite(tau) = self.window {
            while self.history.len() > tau {
                self.history.pop_front();
            }
        }
        self.completed += 1;
        Ok(())
    }
}
