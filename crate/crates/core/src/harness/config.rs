//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{AgentConfig, BehaviorComponent, OfflineDataset, QTable};
use crate::bandit::{BanditState, Window, DEFAULT_ARMS, DEFAULT_EXPLORATION, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::mdp::{build_chain_mdp, value_iteration, Mdp, MdpDoc, Objective, Policy};
use crate::replay::Strategy;
use crate::surrogate::SurrogateConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MdpSpec {
    Chain {
        #[serde(default = "default_cells")]
        n_cells: usize,
        #[serde(default = "default_step_reward")]
        step_reward: f64,
        #[serde(default = "default_goal_reward")]
        goal_reward: f64,
        #[serde(default = "default_discount")]
        discount: f64,
    },
    File {
        path: PathBuf,
    },
    Inline {
        spec: MdpDoc,
    },
}

fn default_cells() -> usize {
    10
}
fn default_step_reward() -> f64 {
    -1.0
}
fn default_goal_reward() -> f64 {
    10.0
}
fn default_discount() -> f64 {
    0.9
}

impl MdpSpec {
    pub fn build(&self) -> Result<Mdp> {
        match self {
            MdpSpec::Chain {
                n_cells,
                step_reward,
                goal_reward,
                discount,
            } => build_chain_mdp(*n_cells, *step_reward, *goal_reward, *discount),
            MdpSpec::File { path } => Mdp::load(path),
            MdpSpec::Inline { spec } => spec.clone().try_into(),
        }
    }
}

/// A behavior policy for offline data generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    ConstantAction {
        action: usize,
    },
    Optimal {},
    Uniform {},
    /// `probs[s][a]`
    Table {
        probs: Vec<Vec<f64>>,
    },
}

impl PolicySpec {
    pub fn build(&self, mdp: &Mdp) -> Result<Policy> {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        match self {
            PolicySpec::ConstantAction { action } => {
                if *action >= na {
                    return Err(Error::OutOfRange {
                        what: "action",
                        index: *action,
                        bound: na,
                    });
                }
                Policy::deterministic(na, &vec![*action; ns])
            }
            PolicySpec::Optimal {} => {
                let q: QTable = value_iteration(mdp, Objective::Maximize, 1e-12);
                Policy::deterministic(na, &q.greedy_actions())
            }
            PolicySpec::Uniform {} => Ok(Policy::uniform(ns, na)),
            PolicySpec::Table { probs } => {
                if probs.len() != ns {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{ns} policy rows"),
                        actual: probs.len().to_string(),
                    });
                }
                Policy::new(ns, na, probs.concat())
            }
        }
    }

    fn label(&self) -> String {
        match self {
            PolicySpec::ConstantAction { action } => format!("action{action}"),
            PolicySpec::Optimal {} => "optimal".into(),
            PolicySpec::Uniform {} => "uniform".into(),
            PolicySpec::Table { .. } => "table".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorSpec {
    pub policy: PolicySpec,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OfflineDataSpec {
    /// Generated per run seed from a behavior mixture.
    Generate {
        policies: Vec<BehaviorSpec>,
        n_steps: usize,
    },
    /// A dataset saved with `OfflineDataset::save_csv`.
    File { path: PathBuf },
}

impl OfflineDataSpec {
    /// Behavior components with weights normalized to sum to one.
    pub fn behaviors(&self, mdp: &Mdp) -> Result<Vec<BehaviorComponent>> {
        match self {
            OfflineDataSpec::Generate { policies, .. } => {
                let total: f64 = policies.iter().map(|b| b.weight).sum();
                policies
                    .iter()
                    .map(|b| {
                        Ok(BehaviorComponent {
                            name: b.policy.label(),
                            policy: b.policy.build(mdp)?,
                            weight: b.weight / total,
                        })
                    })
                    .collect()
            }
            OfflineDataSpec::File { .. } => Ok(Vec::new()),
        }
    }

    pub fn load(&self) -> Result<Option<OfflineDataset>> {
        match self {
            OfflineDataSpec::File { path } => OfflineDataset::load_csv(path).map(Some),
            OfflineDataSpec::Generate { .. } => Ok(None),
        }
    }
}

/// What closes a bandit period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PeriodSpec {
    #[default]
    Episode,
    Steps(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategySpec {
    Fixed {
        ratio: f64,
    },
    Decreasing {
        #[serde(default = "default_high")]
        high: f64,
        #[serde(default = "default_low")]
        low: f64,
        /// Required when periods are episodes; derived for fixed-step periods.
        #[serde(default)]
        total_periods: Option<usize>,
    },
    /// Draws a ratio uniformly from `arms` (default: the bandit's arms).
    Uniform {
        #[serde(default)]
        arms: Option<Vec<f64>>,
    },
    BalancedReplay {
        #[serde(default = "default_smoothing")]
        smoothing: f64,
    },
    Road {},
}

fn default_high() -> f64 {
    0.5
}
fn default_low() -> f64 {
    0.1
}
fn default_smoothing() -> f64 {
    1e-3
}

/// Window length as a positive integer or the string `"growing"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WindowSpec {
    Finite(usize),
    Named(NamedWindow),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamedWindow {
    Growing,
}

impl From<WindowSpec> for Window {
    fn from(w: WindowSpec) -> Self {
        match w {
            WindowSpec::Finite(n) => Window::Finite(n),
            WindowSpec::Named(NamedWindow::Growing) => Window::Growing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BanditConfig {
    pub arms: Vec<f64>,
    pub exploration: f64,
    pub window: WindowSpec,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            arms: DEFAULT_ARMS.to_vec(),
            exploration: DEFAULT_EXPLORATION,
            window: WindowSpec::Finite(DEFAULT_WINDOW),
        }
    }
}

impl BanditConfig {
    pub fn build(&self) -> Result<BanditState> {
        BanditState::new(self.arms.clone(), self.window.into(), self.exploration)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub rollouts: usize,
    /// Online steps between evaluations (an evaluation also runs at step 0).
    pub interval: usize,
    pub max_steps: usize,
    /// Number of trailing evaluations averaged into the final score.
    pub final_window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rollouts: 20,
            interval: 50,
            max_steps: 100,
            final_window: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub mdp: MdpSpec,
    pub offline_data: OfflineDataSpec,
    pub offline_pretrain_steps: usize,
    pub online_steps: usize,
    #[serde(default)]
    pub period: PeriodSpec,
    pub strategy: StrategySpec,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
    #[serde(default)]
    pub bandit: BanditConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_one_usize")]
    pub updates_per_step: usize,
    #[serde(default = "default_batch")]
    pub train_batch_size: usize,
    #[serde(default = "default_episode_steps")]
    pub max_episode_steps: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_one_usize() -> usize {
    1
}
fn default_batch() -> usize {
    32
}
fn default_episode_steps() -> usize {
    100
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates; relative file paths resolve against the config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let MdpSpec::File { path } = &mut cfg.mdp {
            resolve(path);
        }
        if let OfflineDataSpec::File { path } = &mut cfg.offline_data {
            resolve(path);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.strategy_label())
    }

    pub fn strategy_label(&self) -> String {
        match &self.strategy {
            StrategySpec::Fixed { ratio } => format!("fixed({ratio})"),
            StrategySpec::Decreasing { high, low, .. } => format!("decreasing({high}->{low})"),
            StrategySpec::Uniform { .. } => "uniform".into(),
            StrategySpec::BalancedReplay { .. } => "balanced_replay".into(),
            StrategySpec::Road {} => "road".into(),
        }
    }

    /// Number of periods when they have a fixed length.
    pub fn fixed_period_count(&self) -> Option<usize> {
        match self.period {
            PeriodSpec::Steps(n) => Some(self.online_steps.div_ceil(n)),
            PeriodSpec::Episode => None,
        }
    }

    pub fn build_strategy(&self) -> Result<Strategy> {
        let s = match &self.strategy {
            StrategySpec::Fixed { ratio } => Strategy::Fixed { ratio: *ratio },
            StrategySpec::Decreasing {
                high,
                low,
                total_periods,
            } => Strategy::Decreasing {
                high: *high,
                low: *low,
                total_periods: total_periods.or(self.fixed_period_count()).ok_or_else(|| {
                    Error::Config(
                        "decreasing strategy with episode periods needs total_periods".into(),
                    )
                })?,
            },
            StrategySpec::Uniform { arms } => Strategy::Uniform {
                arms: arms.clone().unwrap_or_else(|| self.bandit.arms.clone()),
            },
            StrategySpec::BalancedReplay { smoothing } => Strategy::BalancedReplay {
                smoothing: *smoothing,
            },
            StrategySpec::Road {} => Strategy::Road(self.bandit.build()?),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |msg: String| Err(Error::Config(msg));
        if self.online_steps == 0 {
            return cfg_err("online_steps must be positive".into());
        }
        if self.seeds.is_empty() {
            return cfg_err("seeds must be non-empty".into());
        }
        if self.updates_per_step == 0 || self.train_batch_size == 0 || self.max_episode_steps == 0 {
            return cfg_err(
                "updates_per_step, train_batch_size and max_episode_steps must be positive".into(),
            );
        }
        if let PeriodSpec::Steps(0) = self.period {
            return cfg_err("period steps must be positive".into());
        }
        let e = &self.eval;
        if e.rollouts == 0 || e.interval == 0 || e.max_steps == 0 || e.final_window == 0 {
            return cfg_err("eval fields must be positive".into());
        }
        if let OfflineDataSpec::Generate { policies, n_steps } = &self.offline_data {
            if policies.is_empty() || *n_steps == 0 {
                return cfg_err("offline_data needs policies and n_steps > 0".into());
            }
            if policies
                .iter()
                .any(|b| !(b.weight > 0.0 && b.weight.is_finite()))
            {
                return cfg_err("behavior weights must be positive".into());
            }
        }
        self.agent.validate()?;
        self.surrogate.validate()?;
        self.bandit.build()?;
        if !matches!(self.mdp, MdpSpec::File { .. }) {
            self.mdp.build()?;
        }
        self.build_strategy().map(|_| ())
    }
}
