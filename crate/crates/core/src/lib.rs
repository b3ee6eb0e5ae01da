//! Bandit-driven mixing of offline and online replay data for tabular
//! Q-learning, with exact dynamic-programming oracles and numerical checks
//! of the mixing-ratio hypergradient.

pub mod agent;
pub mod bandit;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod replay;
pub mod surrogate;
pub mod theory;

pub use nalgebra;

pub use agent::{AgentConfig, OfflineDataset, QTable};
pub use bandit::{BanditState, Window};
pub use error::{Error, Result};
pub use mdp::{Mdp, OccupancyMeasure, Policy, Trajectory, Transition};
pub use replay::{MixingDirective, OnlineBuffer, Source, Strategy};
pub use surrogate::{SurrogateConfig, SurrogateStats};
