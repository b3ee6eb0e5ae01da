//! Monte Carlo checks of the overestimation bias of a noisy policy-gradient
//! step, and of the signal-to-noise estimate built from characteristic lengths.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};

/// Gaussian noise `ε ∼ N(0, amplitude · K)` over a row of actions.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    kernel: DMatrix<f64>,
    amplitude: f64,
    /// `L` with `L Lᵀ = K`, keeping only positive eigen-directions.
    factor: DMatrix<f64>,
}

impl NoiseModel {
    pub fn new(kernel: DMatrix<f64>, amplitude: f64) -> Result<Self> {
        let n = kernel.nrows();
        if n == 0 || kernel.ncols() != n {
            return Err(Error::ShapeMismatch {
                expected: "square nonempty kernel".into(),
                actual: format!("{}x{}", kernel.nrows(), kernel.ncols()),
            });
        }
        if kernel.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("kernel".into()));
        }
        if !(amplitude >= 0.0 && amplitude.is_finite()) {
            return Err(Error::invalid(
                "amplitude",
                "must be finite and nonnegative",
            ));
        }
        for i in 0..n {
            for j in 0..i {
                if (kernel[(i, j)] - kernel[(j, i)]).abs() > 1e-12 {
                    return Err(Error::invalid("kernel", format!("asymmetric at ({i},{j})")));
                }
            }
        }
        let eig = SymmetricEigen::new(kernel.clone());
        if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
            if min < -1e-10 {
                return Err(Error::invalid(
                    "kernel",
                    format!("not positive semidefinite (eigenvalue {min:e})"),
                ));
            }
        }
        let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..n)
            .filter(|&k| eig.eigenvalues[k] > 1e-12 * top.max(f64::MIN_POSITIVE))
            .collect();
        let factor = DMatrix::from_fn(n, keep.len(), |i, j| {
            let k = keep[j];
            eig.eigenvectors[(i, k)] * eig.eigenvalues[k].sqrt()
        });
        Ok(Self {
            kernel,
            amplitude,
            factor,
        })
    }

    /// `K(a, a') = σ²` when `a = a'`, else 0.
    pub fn white(n: usize, sigma2: f64) -> Result<Self> {
        Self::new(DMatrix::identity(n, n), sigma2)
    }

    pub fn dim(&self) -> usize {
        self.kernel.nrows()
    }

    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        if self.amplitude == 0.0 || self.factor.ncols() == 0 {
            return DVector::zeros(self.dim());
        }
        let z = DVector::from_fn(self.factor.ncols(), |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        (&self.factor * z) * self.amplitude.sqrt()
    }

    /// `E[ε(a)²]` per action.
    pub fn marginal_variance(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.amplitude * self.kernel[(i, i)])
            .collect()
    }
}

/// Welford running mean and variance.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn stderr(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BiasReport {
    pub draws: usize,
    pub beta: f64,
    pub empirical_bias: f64,
    pub empirical_bias_stderr: f64,
    pub predicted_bias: f64,
    pub predicted_bias_stderr: f64,
    /// `E_{a∼π^k}[ε(a)]`, zero in expectation.
    pub baseline_bias: f64,
    pub baseline_bias_stderr: f64,
    /// `E_π[ε] − E_{π^k}[ε]`: same expectation as the bias, without the
    /// zero-mean baseline noise.
    pub bias_less_baseline: f64,
    pub bias_less_baseline_stderr: f64,
    pub empirical_true_advantage: f64,
    pub empirical_true_advantage_stderr: f64,
    pub predicted_true_advantage: f64,
    /// `bias_less_baseline / empirical_true_advantage`.
    pub snr: f64,
    /// `empirical_bias / empirical_true_advantage`.
    pub snr_raw: f64,
    /// Draws where the perturbed policy went negative and was clipped.
    pub clipped_draws: usize,
}

fn expect(p: &[f64], x: &[f64]) -> f64 {
    p.iter().zip(x).map(|(p, x)| p * x).sum()
}

fn variance(p: &[f64], x: &[f64]) -> f64 {
    let mean = expect(p, x);
    p.iter().zip(x).map(|(p, x)| p * (x - mean).powi(2)).sum()
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::invalid(
            "base_policy",
            "entries must be finite and nonnegative",
        ));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("base_policy", format!("sums to {sum}")));
    }
    Ok(())
}

/// One linearized policy-gradient step `π ∝ π^k (1 + β (f̂ − V̂))` per noise draw.
pub fn bias_monte_carlo<R: Rng + ?Sized>(
    f_true: &[f64],
    noise: &NoiseModel,
    base_policy: &[f64],
    beta: f64,
    n_draws: usize,
    rng: &mut R,
) -> Result<BiasReport> {
    let n = f_true.len();
    if noise.dim() != n || base_policy.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} actions"),
            actual: format!("noise {}, policy {}", noise.dim(), base_policy.len()),
        });
    }
    if n_draws == 0 {
        return Err(Error::invalid("n_draws", "must be positive"));
    }
    if !beta.is_finite() {
        return Err(Error::NonFinite("beta".into()));
    }
    check_distribution(base_policy)?;

    let mut bias = Moments::default();
    let mut predicted = Moments::default();
    let mut baseline = Moments::default();
    let mut excess = Moments::default();
    let mut advantage = Moments::default();
    let mut clipped = 0;
    let v_true = expect(base_policy, f_true);
    let mut pi = vec![0.0; n];
    for _ in 0..n_draws {
        let eps = noise.sample(rng);
        let eps = eps.as_slice();
        let f_hat: Vec<f64> = f_true.iter().zip(eps).map(|(f, e)| f + e).collect();
        let v_hat = expect(base_policy, &f_hat);
        let mut negative = false;
        for a in 0..n {
            pi[a] = base_policy[a] * (1.0 + beta * (f_hat[a] - v_hat));
            if pi[a] < 0.0 {
                negative = true;
                pi[a] = 0.0;
            }
        }
        if negative {
            clipped += 1;
            let z: f64 = pi.iter().sum();
            if z <= 0.0 {
                pi.copy_from_slice(base_policy);
            } else {
                pi.iter_mut().for_each(|p| *p /= z);
            }
        }
        let (on_pi, on_base) = (expect(&pi, eps), expect(base_policy, eps));
        bias.push(on_pi);
        baseline.push(on_base);
        excess.push(on_pi - on_base);
        predicted.push(beta * variance(base_policy, eps));
        advantage.push(expect(&pi, f_true) - v_true);
    }
    Ok(BiasReport {
        draws: n_draws,
        beta,
        empirical_bias: bias.mean,
        empirical_bias_stderr: bias.stderr(),
        predicted_bias: predicted.mean,
        predicted_bias_stderr: predicted.stderr(),
        baseline_bias: baseline.mean,
        baseline_bias_stderr: baseline.stderr(),
        bias_less_baseline: excess.mean,
        bias_less_baseline_stderr: excess.stderr(),
        empirical_true_advantage: advantage.mean,
        empirical_true_advantage_stderr: advantage.stderr(),
        predicted_true_advantage: beta * variance(base_policy, f_true),
        snr: excess.mean / advantage.mean,
        snr_raw: bias.mean / advantage.mean,
        clipped_draws: clipped,
    })
}

/// Improvement `E_π[f] − E_{π^k}[f]` of the exponential tilt `π ∝ π^k e^{βf}`,
/// which equals `β Var_{π^k}(f) + O(β²)`.
pub fn exponential_tilt_improvement(f: &[f64], base_policy: &[f64], beta: f64) -> Result<f64> {
    if f.len() != base_policy.len() || f.is_empty() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} actions", base_policy.len()),
            actual: f.len().to_string(),
        });
    }
    check_distribution(base_policy)?;
    let top = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut pi: Vec<f64> = f
        .iter()
        .zip(base_policy)
        .map(|(v, p)| p * (beta * (v - top)).exp())
        .collect();
    let z: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= z);
    Ok(expect(&pi, f) - expect(base_policy, f))
}

/// `‖values‖ / ‖∇values‖` with central differences on interior grid points.
/// Returns `+∞` when the gradient vanishes.
pub fn characteristic_length(values: &[f64], spacing: f64) -> Result<f64> {
    if values.len() < 3 {
        return Err(Error::invalid("values", "grid needs at least 3 points"));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::invalid("spacing", "must be positive"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for w in values.windows(3) {
        num += w[1] * w[1];
        den += ((w[2] - w[0]) / (2.0 * spacing)).powi(2);
    }
    if den == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((num / den).sqrt())
}

/// Expected characteristic length of the noise field, from the kernel:
/// `E‖ε‖² / E‖∇ε‖²` on interior grid points.
fn noise_characteristic_length(noise: &NoiseModel, spacing: f64) -> f64 {
    let k = noise.kernel();
    let n = noise.dim();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 1..n - 1 {
        num += k[(i, i)];
        den += (k[(i + 1, i + 1)] + k[(i - 1, i - 1)] - 2.0 * k[(i + 1, i - 1)])
            / (4.0 * spacing * spacing);
    }
    if den <= 0.0 {
        return f64::INFINITY;
    }
    (num / den).sqrt()
}

/// `ρ ≈ (E[ε²] / ‖f‖²) (λ_f / λ_ε)²`, norms as grid averages.
///
/// Sentinels: zero noise amplitude or a perfectly smooth noise field
/// (`λ_ε = ∞`) give 0; a constant or zero `f` gives `+∞`.
pub fn snr_prediction(f_true: &[f64], noise: &NoiseModel, spacing: f64) -> Result<f64> {
    if noise.dim() != f_true.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} grid points", f_true.len()),
            actual: noise.dim().to_string(),
        });
    }
    let lambda_f = characteristic_length(f_true, spacing)?;
    let lambda_eps = noise_characteristic_length(noise, spacing);
    if noise.amplitude() == 0.0 || lambda_eps.is_infinite() {
        return Ok(0.0);
    }
    let n = f_true.len() as f64;
    let f_sq = f_true.iter().map(|v| v * v).sum::<f64>() / n;
    if lambda_f.is_infinite() || f_sq == 0.0 {
        return Ok(f64::INFINITY);
    }
    let eps_sq = noise.marginal_variance().iter().sum::<f64>() / n;
    Ok(eps_sq / f_sq * (lambda_f / lambda_eps).powi(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_amplitude_has_no_bias() {
        let noise = NoiseModel::white(3, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = bias_monte_carlo(
            &[1.0, 0.0, -1.0],
            &noise,
            &[0.2, 0.3, 0.5],
            0.05,
            500,
            &mut rng,
        )
        .unwrap();
        assert_eq!(r.empirical_bias, 0.0);
        assert_eq!(r.predicted_bias, 0.0);
        assert_eq!(r.clipped_draws, 0);
    }

    #[test]
    fn linear_step_true_advantage_is_exact() {
        let noise = NoiseModel::white(3, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = [0.2, 0.3, 0.5];
        let f = [1.0, 0.0, -1.0];
        let r = bias_monte_carlo(&f, &noise, &base, 0.05, 3, &mut rng).unwrap();
        assert!((r.empirical_true_advantage - r.predicted_true_advantage).abs() < 1e-15);
    }

    #[test]
    fn clipping_is_flagged() {
        let noise = NoiseModel::white(2, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = bias_monte_carlo(&[10.0, -10.0], &noise, &[0.5, 0.5], 1.0, 4, &mut rng).unwrap();
        assert_eq!(r.clipped_draws, 4);
        assert!((r.empirical_true_advantage - 10.0).abs() < 1e-12);
    }

    #[test]
    fn non_psd_kernel_rejected() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(NoiseModel::new(k, 1.0).is_err());
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(NoiseModel::new(k, 1.0).is_err());
    }

    #[test]
    fn correlated_kernel_gives_constant_noise() {
        let noise = NoiseModel::new(DMatrix::from_element(4, 4, 1.0), 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = noise.sample(&mut rng);
        assert!(e.iter().all(|x| (x - e[0]).abs() < 1e-12));
    }

    #[test]
    fn characteristic_length_sentinel_and_scale() {
        assert_eq!(
            characteristic_length(&[2.0; 5], 0.1).unwrap(),
            f64::INFINITY
        );
        let v: Vec<f64> = (0..50).map(|i| (i as f64 * 0.1).sin()).collect();
        let s: Vec<f64> = v.iter().map(|x| 5.0 * x).collect();
        let a = characteristic_length(&v, 0.1).unwrap();
        let b = characteristic_length(&s, 0.1).unwrap();
        assert!((a - b).abs() < 1e-12 * a);
        assert!(characteristic_length(&[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn characteristic_length_of_sine() {
        let n = 10_000;
        let h = 2.0 * std::f64::consts::PI / n as f64;
        let v: Vec<f64> = (0..n).map(|i| (2.0 * i as f64 * h).sin()).collect();
        let l = characteristic_length(&v, h).unwrap();
        assert!((l - 0.5).abs() < 0.01 * 0.5, "{l}");
    }

    #[test]
    fn snr_sentinels_and_symmetry() {
        let n = 600;
        let h = 2.0 * std::f64::consts::PI / n as f64;
        let x: Vec<f64> = (0..n).map(|i| i as f64 * h).collect();
        let f: Vec<f64> = x.iter().map(|x| x.sin()).collect();
        let kernel = DMatrix::from_fn(n, n, |i, j| 0.5 * (x[i] - x[j]).cos());
        let same = NoiseModel::new(kernel.clone(), 1.0).unwrap();
        let rho = snr_prediction(&f, &same, h).unwrap();
        assert!((rho - 1.0).abs() < 1e-2, "{rho}");
        let silent = NoiseModel::new(kernel, 0.0).unwrap();
        assert_eq!(snr_prediction(&f, &silent, h).unwrap(), 0.0);
        let flat = NoiseModel::new(DMatrix::from_element(n, n, 1.0), 1.0).unwrap();
        assert_eq!(snr_prediction(&f, &flat, h).unwrap(), 0.0);
        let same = NoiseModel::white(n, 1.0).unwrap();
        assert_eq!(
            snr_prediction(&vec![0.0; n], &same, h).unwrap(),
            f64::INFINITY
        );
    }

    #[test]
    fn exponential_tilt_error_is_quadratic() {
        let f = [0.3, -1.2, 0.8, 0.1];
        let base = [0.1, 0.4, 0.3, 0.2];
        let var = variance(&base, &f);
        let err = |b: f64| (exponential_tilt_improvement(&f, &base, b).unwrap() - b * var).abs();
        let (e1, e2) = (err(0.02), err(0.01));
        let ratio = e1 / e2;
        assert!((3.6..4.4).contains(&ratio), "{ratio}");
    }
}
