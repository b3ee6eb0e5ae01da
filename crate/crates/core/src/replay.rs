//! Online replay buffer, the linear offline/online mixture sampler and the
//! family of mixing strategies.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::OfflineDataset;
use crate::bandit::BanditState;
use crate::error::{Error, Result};
use crate::mdp::{OccupancyMeasure, Transition};

/// Where a replayed sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Offline,
    Online,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Offline => f.write_str("offline"),
            Source::Online => f.write_str("online"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaggedTransition {
    pub transition: Transition,
    pub source: Source,
}

/// FIFO ring buffer of online transitions.
#[derive(Debug, Clone)]
pub struct OnlineBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    total_inserted: u64,
}

impl OnlineBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("capacity", "must be positive"));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            total_inserted: 0,
        })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        self.total_inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total_inserted(&self) -> u64 {
        self.total_inserted
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }
}

fn check_ratio(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid("m", format!("{m} not in [0,1]")));
    }
    Ok(())
}

/// Draws `batch_size` elements; each is offline with probability `m`,
/// otherwise uniform from the online buffer.
pub fn sample_mixed<R: Rng + ?Sized>(
    offline: &OfflineDataset,
    online: &OnlineBuffer,
    m: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<TaggedTransition>> {
    check_ratio(m)?;
    if batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be positive"));
    }
    if m > 0.0 && offline.is_empty() {
        return Err(Error::EmptySource(Source::Offline));
    }
    if m < 1.0 && online.is_empty() {
        return Err(Error::EmptySource(Source::Online));
    }
    let off = offline.transitions();
    let batch = (0..batch_size)
        .map(|_| {
            if rng.random::<f64>() < m {
                TaggedTransition {
                    transition: off[rng.random_range(0..off.len())],
                    source: Source::Offline,
                }
            } else {
                TaggedTransition {
                    transition: online.items[rng.random_range(0..online.len())],
                    source: Source::Online,
                }
            }
        })
        .collect();
    Ok(batch)
}

/// Uniform batch from a single source.
pub fn sample_source<R: Rng + ?Sized>(
    offline: &OfflineDataset,
    online: &OnlineBuffer,
    source: Source,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    let m = match source {
        Source::Offline => 1.0,
        Source::Online => 0.0,
    };
    Ok(sample_mixed(offline, online, m, batch_size, rng)?
        .into_iter()
        .map(|t| t.transition)
        .collect())
}

/// How the replay batch of a period is drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum MixingDirective {
    /// Offline-sample probability `m`.
    Ratio(f64),
    /// Normalized weights over the union `offline ++ online` as it stood
    /// when the weights were computed.
    Weights(Vec<f64>),
}

impl MixingDirective {
    pub fn ratio(&self) -> Option<f64> {
        match self {
            MixingDirective::Ratio(m) => Some(*m),
            MixingDirective::Weights(_) => None,
        }
    }

    /// Expected offline share of a batch under this directive.
    pub fn expected_offline_fraction(&self, n_offline: usize) -> f64 {
        match self {
            MixingDirective::Ratio(m) => *m,
            MixingDirective::Weights(w) => w.iter().take(n_offline).sum(),
        }
    }
}

/// Per-sample weighted draw over `offline ++ online`. Only the first
/// `weights.len()` union elements are eligible.
pub fn sample_weighted<R: Rng + ?Sized>(
    offline: &OfflineDataset,
    online: &OnlineBuffer,
    weights: &[f64],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<TaggedTransition>> {
    let n_off = offline.len();
    if weights.len() > n_off + online.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("at most {} weights", n_off + online.len()),
            actual: weights.len().to_string(),
        });
    }
    let dist = WeightedIndex::new(weights).map_err(|e| Error::invalid("weights", e.to_string()))?;
    let off = offline.transitions();
    Ok((0..batch_size)
        .map(|_| {
            let i = dist.sample(rng);
            if i < n_off {
                TaggedTransition {
                    transition: off[i],
                    source: Source::Offline,
                }
            } else {
                TaggedTransition {
                    transition: online.items[i - n_off],
                    source: Source::Online,
                }
            }
        })
        .collect())
}

/// Linear schedule from `high` at period 0 to `low` at `total_periods - 1`.
pub fn decreasing_ratio(high: f64, low: f64, total_periods: usize, period: usize) -> Result<f64> {
    if total_periods == 0 {
        return Err(Error::invalid("total_periods", "must be positive"));
    }
    if period >= total_periods {
        return Err(Error::OutOfRange {
            what: "period",
            index: period,
            bound: total_periods,
        });
    }
    if total_periods == 1 {
        return Ok(high);
    }
    if period == total_periods - 1 {
        return Ok(low);
    }
    Ok(high - (high - low) * (period as f64 / (total_periods - 1) as f64))
}

/// Tabular density-ratio weights for Balanced Replay.
///
/// Each union sample with pair `(s,a)` gets weight proportional to
/// `(d^π(s,a) + smoothing) / (d̂(s,a) + smoothing)`, where `d̂` is the empirical
/// pair frequency over `offline ++ online`. Returned weights are normalized
/// and ordered offline-first.
pub fn br_weights(
    offline: &OfflineDataset,
    online: &OnlineBuffer,
    occupancy: &OccupancyMeasure,
    smoothing: f64,
) -> Result<Vec<f64>> {
    if !(smoothing > 0.0 && smoothing.is_finite()) {
        return Err(Error::invalid("smoothing", "must be positive"));
    }
    let union: Vec<&Transition> = offline.transitions().iter().chain(online.iter()).collect();
    let total = union.len() as f64;
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    for t in &union {
        if t.state >= occupancy.n_states() || t.action >= occupancy.n_actions() {
            return Err(Error::OutOfRange {
                what: "state/action",
                index: t.state,
                bound: occupancy.n_states(),
            });
        }
        *counts.entry((t.state, t.action)).or_default() += 1;
    }
    let occ_total: f64 = occupancy.density().iter().sum();
    let mut weights: Vec<f64> = union
        .iter()
        .map(|t| {
            let empirical = counts[&(t.state, t.action)] as f64 / total;
            let target = occupancy.get(t.state, t.action) / occ_total;
            (target + smoothing) / (empirical + smoothing)
        })
        .collect();
    let z: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= z);
    Ok(weights)
}

/// A data-mixing strategy and its state.
#[derive(Debug, Clone)]
pub enum Strategy {
    Fixed {
        ratio: f64,
    },
    Decreasing {
        high: f64,
        low: f64,
        total_periods: usize,
    },
    Uniform {
        arms: Vec<f64>,
    },
    BalancedReplay {
        smoothing: f64,
    },
    Road(BanditState),
}

/// Inputs some strategies need when issuing a directive.
#[derive(Debug, Clone, Copy)]
pub struct DirectiveContext<'a> {
    pub offline: &'a OfflineDataset,
    pub online: &'a OnlineBuffer,
    /// Occupancy of the current online policy (Balanced Replay only).
    pub occupancy: Option<&'a OccupancyMeasure>,
}

impl Strategy {
    pub fn validate(&self) -> Result<()> {
        match self {
            Strategy::Fixed { ratio } => check_ratio(*ratio),
            Strategy::Decreasing {
                high,
                low,
                total_periods,
            } => {
                check_ratio(*high)?;
                check_ratio(*low)?;
                if high < low {
                    return Err(Error::invalid("decreasing", "high must be >= low"));
                }
                if *total_periods == 0 {
                    return Err(Error::invalid("total_periods", "must be positive"));
                }
                Ok(())
            }
            Strategy::Uniform { arms } => {
                if arms.is_empty() {
                    return Err(Error::invalid("arms", "candidate set is empty"));
                }
                arms.iter().try_for_each(|m| check_ratio(*m))
            }
            Strategy::BalancedReplay { smoothing } => {
                if *smoothing > 0.0 && smoothing.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid("smoothing", "must be positive"))
                }
            }
            Strategy::Road(_) => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Strategy::Fixed { ratio } => format!("fixed({ratio})"),
            Strategy::Decreasing { high, low, .. } => format!("decreasing({high}->{low})"),
            Strategy::Uniform { .. } => "uniform".into(),
            Strategy::BalancedReplay { .. } => "balanced_replay".into(),
            Strategy::Road(_) => "road".into(),
        }
    }

    /// Directive for period `period` (0-based).
    pub fn next_directive<R: Rng + ?Sized>(
        &self,
        period: usize,
        ctx: DirectiveContext<'_>,
        rng: &mut R,
    ) -> Result<MixingDirective> {
        match self {
            Strategy::Fixed { ratio } => Ok(MixingDirective::Ratio(*ratio)),
            Strategy::Decreasing {
                high,
                low,
                total_periods,
            } => Ok(MixingDirective::Ratio(decreasing_ratio(
                *high,
                *low,
                *total_periods,
                period,
            )?)),
            Strategy::Uniform { arms } => {
                if arms.is_empty() {
                    return Err(Error::invalid("arms", "candidate set is empty"));
                }
                Ok(MixingDirective::Ratio(
                    arms[rng.random_range(0..arms.len())],
                ))
            }
            Strategy::BalancedReplay { smoothing } => {
                let occ = ctx.occupancy.ok_or_else(|| {
                    Error::invalid("occupancy", "balanced replay needs the online occupancy")
                })?;
                Ok(MixingDirective::Weights(br_weights(
                    ctx.offline,
                    ctx.online,
                    occ,
                    *smoothing,
                )?))
            }
            Strategy::Road(bandit) => Ok(MixingDirective::Ratio(bandit.select_arm()?)),
        }
    }

    /// Feeds the period's surrogate reward back; only ROAD uses it.
    pub fn record(&mut self, directive: &MixingDirective, reward: f64) -> Result<()> {
        if let (Strategy::Road(bandit), MixingDirective::Ratio(m)) = (self, directive) {
            bandit.record(*m, reward)?;
        }
        Ok(())
    }

    pub fn bandit(&self) -> Option<&BanditState> {
        match self {
            Strategy::Road(b) => Some(b),
            _ => None,
        }
    }
}
