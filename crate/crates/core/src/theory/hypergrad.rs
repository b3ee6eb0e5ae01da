//! Exact outer-level gradient of the bi-level data-mixing problem with
//! respect to the linear mixing ratio `m`, on linear-feature Q-functions.
//!
//! Inner problem: ridge-regularized weighted least squares
//! `w*(m) = (Φᵀ D_m Φ + λI)⁻¹ Φᵀ D_m y`, with `D_m = diag(m d_off + (1−m) d_on)`.
//! Outer objective: `J(f) = Σ d^{π_f}(s,a) f(s,a)` with `π_f = softmax(β f)`.
//!
//! The gradient is assembled by the chain rule:
//! `dw/dm = H⁻¹ Φᵀ diag(d_off − d_on) (y − Φw)` from implicit differentiation of
//! the normal equations, and `∂J/∂f(s,a) = d(s,a) (1 + β Ã(s,a))` where `Ã` is
//! the advantage of `q̃(s,a) = f(s,a) + γ E_{s'}[V_g(s')]` and `V_g` is the value
//! of the per-state reward `g(s) = E_{a∼π}[f(s,a)]`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::agent::{softmax_policy, QTable};
use crate::error::{Error, Result};
use crate::mdp::{exact_occupancy, solve_value, Mdp, OccupancyMeasure};

/// Feature matrix `Φ` with one row per state-action pair (`s * n_actions + a`).
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    matrix: DMatrix<f64>,
}

impl Features {
    /// Rejects matrices without full column rank (relative singular value 1e-10).
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let (n, p) = matrix.shape();
        if p == 0 || p > n {
            return Err(Error::invalid(
                "features",
                format!("need 1 <= p <= n_pairs, got {n}x{p}"),
            ));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("features".into()));
        }
        let sv = matrix.clone().svd(false, false).singular_values;
        let max = sv.max();
        let min = sv.min();
        if max == 0.0 || min / max <= 1e-10 {
            return Err(Error::invalid(
                "features",
                "matrix is column-rank deficient",
            ));
        }
        Ok(Self { matrix })
    }

    pub fn identity(n_pairs: usize) -> Self {
        Self {
            matrix: DMatrix::identity(n_pairs, n_pairs),
        }
    }

    pub fn n_pairs(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

/// A linear-feature value function `f = Φ w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearQ {
    pub features: Features,
    pub weights: DVector<f64>,
}

impl LinearQ {
    pub fn new(features: Features, weights: DVector<f64>) -> Result<Self> {
        if weights.len() != features.n_features() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} weights", features.n_features()),
                actual: weights.len().to_string(),
            });
        }
        Ok(Self { features, weights })
    }

    pub fn values(&self) -> DVector<f64> {
        &self.features.matrix * &self.weights
    }

    pub fn to_qtable(&self, n_states: usize, n_actions: usize) -> Result<QTable> {
        QTable::from_values(n_states, n_actions, self.values().iter().copied().collect())
    }
}

fn check_mix(mix: &[f64], n: usize) -> Result<()> {
    if mix.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} mixing weights"),
            actual: mix.len().to_string(),
        });
    }
    if mix.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return Err(Error::invalid(
            "mix_weights",
            "must be finite and nonnegative",
        ));
    }
    if mix.iter().sum::<f64>() <= 0.0 {
        return Err(Error::invalid("mix_weights", "all zero"));
    }
    Ok(())
}

/// `H = Φᵀ D Φ + λ I`, factored, ready for solves.
struct NormalSystem {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl NormalSystem {
    fn new(phi: &Features, mix: &[f64], ridge: f64) -> Result<Self> {
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::invalid("ridge", "must be finite and nonnegative"));
        }
        check_mix(mix, phi.n_pairs())?;
        let p = phi.n_features();
        let weighted = DMatrix::from_fn(phi.n_pairs(), p, |i, j| mix[i] * phi.matrix[(i, j)]);
        let h = phi.matrix.transpose() * weighted + DMatrix::identity(p, p) * ridge;
        if ridge == 0.0 {
            let eig = SymmetricEigen::new(h.clone()).eigenvalues;
            if eig.min() <= 1e-12 * eig.max().abs().max(f64::MIN_POSITIVE) {
                return Err(Error::SingularNormalMatrix);
            }
        }
        let chol = h.cholesky().ok_or(if ridge == 0.0 {
            Error::SingularNormalMatrix
        } else {
            Error::Singular("weighted normal equations".into())
        })?;
        Ok(Self { chol })
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }
}

/// `Φᵀ diag(weights) v`.
fn weighted_project(phi: &Features, weights: &[f64], v: &DVector<f64>) -> DVector<f64> {
    let scaled = DVector::from_iterator(v.len(), v.iter().zip(weights).map(|(x, d)| x * d));
    phi.matrix.transpose() * scaled
}

/// Exact minimizer of the weighted (ridge) least-squares Bellman fit.
///
/// `mix_weights` may be any nonnegative vector; at `ridge = 0` its overall
/// scale cancels.
pub fn weighted_fqi_solve(
    phi: &Features,
    target: &[f64],
    mix_weights: &[f64],
    ridge: f64,
) -> Result<DVector<f64>> {
    if target.len() != phi.n_pairs() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} targets", phi.n_pairs()),
            actual: target.len().to_string(),
        });
    }
    let system = NormalSystem::new(phi, mix_weights, ridge)?;
    let y = DVector::from_column_slice(target);
    Ok(system.solve(&weighted_project(phi, mix_weights, &y)))
}

fn check_mdp_features(mdp: &Mdp, phi: &Features) -> Result<()> {
    if phi.n_pairs() != mdp.n_pairs() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} feature rows", mdp.n_pairs()),
            actual: phi.n_pairs().to_string(),
        });
    }
    Ok(())
}

fn values_table(mdp: &Mdp, values: &DVector<f64>) -> Result<QTable> {
    QTable::from_values(
        mdp.n_states(),
        mdp.n_actions(),
        values.iter().copied().collect(),
    )
}

/// `E_{(s,a)∼d^{softmax(β f_w)}}[f_w(s,a)]`.
pub fn outer_objective(mdp: &Mdp, phi: &Features, w: &DVector<f64>, beta: f64) -> Result<f64> {
    check_mdp_features(mdp, phi)?;
    let f = values_table(mdp, &(&phi.matrix * w))?;
    objective_of_table(mdp, &f, beta)
}

pub(crate) fn objective_of_table(mdp: &Mdp, f: &QTable, beta: f64) -> Result<f64> {
    let pi = softmax_policy(f, beta)?;
    let d = exact_occupancy(mdp, &pi)?;
    Ok(d.density().iter().zip(f.values()).map(|(d, f)| d * f).sum())
}

/// Gradient of the outer objective with respect to the table `f`,
/// through both the integrand and the softmax policy's occupancy.
pub fn objective_gradient_f(mdp: &Mdp, f: &QTable, beta: f64) -> Result<Vec<f64>> {
    let pi = softmax_policy(f, beta)?;
    let d = exact_occupancy(mdp, &pi)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let g = DVector::from_iterator(
        ns,
        (0..ns).map(|s| pi.row(s).iter().zip(f.row(s)).map(|(p, v)| p * v).sum()),
    );
    let v = solve_value(mdp, &pi, &g)?;
    let mut grad = vec![0.0; ns * na];
    for s in 0..ns {
        let q_tilde: Vec<f64> = (0..na)
            .map(|a| {
                let cont: f64 = mdp
                    .transition_row(s, a)
                    .iter()
                    .zip(v.iter())
                    .map(|(p, v)| p * v)
                    .sum();
                f.get(s, a) + mdp.discount() * cont
            })
            .collect();
        let baseline: f64 = pi.row(s).iter().zip(&q_tilde).map(|(p, q)| p * q).sum();
        for a in 0..na {
            grad[s * na + a] = d.get(s, a) * (1.0 + beta * (q_tilde[a] - baseline));
        }
    }
    Ok(grad)
}

fn mixture(d_off: &OccupancyMeasure, d_on: &OccupancyMeasure, m: f64) -> Result<Vec<f64>> {
    if d_off.density().len() != d_on.density().len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} pairs", d_off.density().len()),
            actual: d_on.density().len().to_string(),
        });
    }
    Ok(d_off
        .density()
        .iter()
        .zip(d_on.density())
        .map(|(a, b)| m * a + (1.0 - m) * b)
        .collect())
}

/// Intermediate quantities shared by the exact and pointwise gradients.
struct InnerSolution {
    mix: Vec<f64>,
    diff: Vec<f64>,
    system: NormalSystem,
    f: DVector<f64>,
    residual: DVector<f64>,
}

fn solve_inner(
    phi: &Features,
    target: &[f64],
    d_off: &OccupancyMeasure,
    d_on: &OccupancyMeasure,
    m: f64,
    ridge: f64,
) -> Result<InnerSolution> {
    if !(m > 0.0 && m < 1.0) {
        return Err(Error::invalid("m", format!("{m} not in (0,1)")));
    }
    let mix = mixture(d_off, d_on, m)?;
    if ridge == 0.0 && mix.iter().any(|d| *d <= 0.0) {
        return Err(Error::invalid("mix", "d_m must be positive when ridge = 0"));
    }
    let diff: Vec<f64> = d_off
        .density()
        .iter()
        .zip(d_on.density())
        .map(|(a, b)| a - b)
        .collect();
    let system = NormalSystem::new(phi, &mix, ridge)?;
    let y = DVector::from_column_slice(target);
    let w = system.solve(&weighted_project(phi, &mix, &y));
    let f = &phi.matrix * &w;
    let residual = &y - &f;
    Ok(InnerSolution {
        mix,
        diff,
        system,
        f,
        residual,
    })
}

/// Exact `dJ_out/dm` at mixing ratio `m ∈ (0,1)`.
#[allow(clippy::too_many_arguments)]
pub fn outer_gradient_m(
    mdp: &Mdp,
    phi: &Features,
    target: &[f64],
    d_off: &OccupancyMeasure,
    d_on: &OccupancyMeasure,
    m: f64,
    beta: f64,
    ridge: f64,
) -> Result<f64> {
    check_mdp_features(mdp, phi)?;
    let inner = solve_inner(phi, target, d_off, d_on, m, ridge)?;
    let dw = inner
        .system
        .solve(&weighted_project(phi, &inner.diff, &inner.residual));
    let df = &phi.matrix * dw;
    let grad_f = objective_gradient_f(mdp, &values_table(mdp, &inner.f)?, beta)?;
    Ok(grad_f.iter().zip(df.iter()).map(|(g, d)| g * d).sum())
}

/// Pointwise (full function space) form
/// `−Σ ∂J/∂f · (d_off − d_on) · δ / d_m` with `δ = f − y`, evaluated at the
/// linear-feature solution. Reported next to the exact gradient; it agrees
/// only when the feature class is rich enough to make the inner solve local.
#[allow(clippy::too_many_arguments)]
pub fn pointwise_gradient_m(
    mdp: &Mdp,
    phi: &Features,
    target: &[f64],
    d_off: &OccupancyMeasure,
    d_on: &OccupancyMeasure,
    m: f64,
    beta: f64,
    ridge: f64,
) -> Result<f64> {
    check_mdp_features(mdp, phi)?;
    let inner = solve_inner(phi, target, d_off, d_on, m, ridge)?;
    let grad_f = objective_gradient_f(mdp, &values_table(mdp, &inner.f)?, beta)?;
    Ok((0..grad_f.len())
        .filter(|&i| inner.mix[i] > 0.0)
        .map(|i| grad_f[i] * inner.diff[i] * inner.residual[i] / inner.mix[i])
        .sum())
}

/// A randomized gradient-check problem.
#[derive(Debug, Clone)]
pub struct GradientFixture {
    pub mdp: Mdp,
    pub features: Features,
    pub target: Vec<f64>,
    pub d_off: OccupancyMeasure,
    pub d_on: OccupancyMeasure,
    pub m: f64,
    pub beta: f64,
    pub ridge: f64,
}

fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / z).collect()
}

impl GradientFixture {
    /// Random MDP with `|S| ≤ 6`, `|A| ≤ 3` and `p ≤ |S||A| − 2` Gaussian features.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, ridge: f64) -> Result<Self> {
        let ns = rng.random_range(2..=6);
        let na = rng.random_range(2..=3);
        let n = ns * na;
        let mut transition = Vec::with_capacity(n * ns);
        for _ in 0..n {
            transition.extend(random_simplex(ns, rng));
        }
        let reward = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mdp = Mdp::new(
            ns,
            na,
            transition,
            reward,
            random_simplex(ns, rng),
            rng.random_range(0.5..0.95),
            vec![false; ns],
        )?;
        let p = rng.random_range(1..=n - 2);
        let features = loop {
            let mat = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
            if let Ok(f) = Features::new(mat) {
                break f;
            }
        };
        Ok(Self {
            target: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
            d_off: OccupancyMeasure::new(ns, na, random_simplex(n, rng))?,
            d_on: OccupancyMeasure::new(ns, na, random_simplex(n, rng))?,
            m: rng.random_range(0.1..0.9),
            beta: rng.random_range(0.5..2.0),
            ridge,
            features,
            mdp,
        })
    }

    pub fn objective_at(&self, m: f64) -> Result<f64> {
        let mix = mixture(&self.d_off, &self.d_on, m)?;
        let w = weighted_fqi_solve(&self.features, &self.target, &mix, self.ridge)?;
        outer_objective(&self.mdp, &self.features, &w, self.beta)
    }

    pub fn gradient(&self) -> Result<f64> {
        outer_gradient_m(
            &self.mdp,
            &self.features,
            &self.target,
            &self.d_off,
            &self.d_on,
            self.m,
            self.beta,
            self.ridge,
        )
    }

    /// Gradients that must vanish: identical source occupancies, and
    /// tabular features with a target the inner solve already reproduces.
    pub fn trivial_cases(&self) -> Result<(f64, f64)> {
        let equal = outer_gradient_m(
            &self.mdp,
            &self.features,
            &self.target,
            &self.d_off,
            &self.d_off,
            self.m,
            self.beta,
            self.ridge,
        )?;
        let identity = Features::identity(self.mdp.n_pairs());
        let converged = outer_gradient_m(
            &self.mdp,
            &identity,
            &self.target,
            &self.d_off,
            &self.d_on,
            self.m,
            self.beta,
            0.0,
        )?;
        Ok((equal, converged))
    }

    pub fn pointwise_gradient(&self) -> Result<f64> {
        pointwise_gradient_m(
            &self.mdp,
            &self.features,
            &self.target,
            &self.d_off,
            &self.d_on,
            self.m,
            self.beta,
            self.ridge,
        )
    }
}

/// One row of a gradient-check report.
#[derive(Debug, Clone, Serialize)]
pub struct GradientCheck {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_features: usize,
    pub m: f64,
    pub analytic: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
    pub pointwise: f64,
}

/// Compares the analytic gradient with a central difference of step `h`.
pub fn gradient_check(fx: &GradientFixture, h: f64) -> Result<GradientCheck> {
    let analytic = fx.gradient()?;
    let fd = (fx.objective_at(fx.m + h)? - fx.objective_at(fx.m - h)?) / (2.0 * h);
    Ok(GradientCheck {
        n_states: fx.mdp.n_states(),
        n_actions: fx.mdp.n_actions(),
        n_features: fx.features.n_features(),
        m: fx.m,
        analytic,
        finite_difference: fd,
        relative_error: (analytic - fd).abs() / fd.abs().max(1e-8),
        pointwise: fx.pointwise_gradient()?,
    })
}
