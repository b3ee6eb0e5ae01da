//! Numerical checks of the mixing-ratio hypergradient and of the
//! overestimation-bias estimates.

mod bias;
mod hypergrad;

pub use bias::{
    bias_monte_carlo, characteristic_length, exponential_tilt_improvement, snr_prediction,
    BiasReport, NoiseModel,
};
pub use hypergrad::{
    gradient_check, objective_gradient_f, outer_gradient_m, outer_objective, pointwise_gradient_m,
    weighted_fqi_solve, Features, GradientCheck, GradientFixture, LinearQ,
};
