//! Sampling and densities for the Gaussian, exponential and multivariate
//! Laplace distributions.
//!
//! Vectors are column vectors of length `m`; a quadratic form is always
//! `(x − μ)ᵀ Γ⁻¹ (x − μ)`.
//!
//! The multivariate Laplace law with mean `μ`, scale matrix `Γ` and rate
//! parameter `λ` is the scale mixture `x = μ + g·√Φ` with `g ~ N(0, Γ)` and
//! `Φ ~ Exp(mean λ)`. Its covariance is `λΓ` and its density is
//!
//! ```text
//! p(x) = 2 / ((2π)^(m/2) λ |Γ|^(1/2)) · K_{m/2−1}(√(2q/λ)) / (√(λq/2))^(m/2−1)
//! ```
//!
//! where `q` is the quadratic form above. At `x = μ` the Bessel argument
//! vanishes; [`MvLaplaceParams::log_pdf`] clamps `q` to at least
//! [`QUAD_FORM_FLOOR`] there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::rng::Rng;

/// Smallest quadratic form fed to the Laplace density.
pub const QUAD_FORM_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `ln K_ν(z)` for `ν ≥ 0` and `z > 0`.
///
/// Half-integer orders use the terminating closed form. Every other order
/// integrates `∫₀^∞ e^(−z·cosh t)·cosh(νt) dt` with a step-halving
/// trapezoid rule; the integrand is even and analytic in `t`, so the rule
/// converges geometrically once the step resolves the peak.
pub fn log_bessel_k(order: f64, z: f64) -> Result<f64> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::Domain(format!("K_ν(z) needs z > 0, got {z}")));
    }
    if !(order >= 0.0) || !order.is_finite() {
        return Err(Error::Domain(format!("K_ν(z) needs ν ≥ 0, got {order}")));
    }
    let twice = 2.0 * order;
    if twice.fract() == 0.0 && (twice as u64) % 2 == 1 {
        return Ok(log_bessel_k_half_integer((twice as u64 - 1) / 2, z));
    }
    log_bessel_k_quadrature(order, z)
}

/// `K_ν(z)`; see [`log_bessel_k`].
pub fn bessel_k(order: f64, z: f64) -> Result<f64> {
    log_bessel_k(order, z).map(f64::exp)
}

/// `ln K_{n+1/2}(z) = ln[√(π/2z)·e^(−z)·Σ_k (n+k)!/(k!(n−k)!(2z)^k)]`.
fn log_bessel_k_half_integer(n: u64, z: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 0..n {
        // ratio of consecutive terms: (n+k+1)(n−k) / ((k+1)·2z)
        term *= ((n + k + 1) * (n - k)) as f64 / ((k + 1) as f64 * 2.0 * z);
        sum += term;
    }
    0.5 * (std::f64::consts::PI / (2.0 * z)).ln() - z + sum.ln()
}

fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

fn log_bessel_k_quadrature(order: f64, z: f64) -> Result<f64> {
    let log_f = |t: f64| -z * t.cosh() + ln_cosh(order * t);

    // Coarse scan for the peak and a cut-off where the integrand is below
    // e^-45 of the peak and falling.
    let mut peak = log_f(0.0);
    let mut t = 0.0;
    let coarse = 0.25;
    loop {
        t += coarse;
        let v = log_f(t);
        peak = peak.max(v);
        if v < peak - 45.0 {
            break;
        }
        if t > 800.0 {
            return Err(Error::Numeric(format!(
                "K_{order}({z}): integrand did not decay by t = {t}"
            )));
        }
    }
    let upper = t;
    let f = |t: f64| (log_f(t) - peak).exp();

    let mut panels: u64 = 32;
    let mut h = upper / panels as f64;
    let mut sum = 0.5 * (f(0.0) + f(upper)) + (1..panels).map(|k| f(k as f64 * h)).sum::<f64>();
    let mut estimate = h * sum;
    for level in 0..24 {
        let mid: f64 = (0..panels).map(|k| f((k as f64 + 0.5) * h)).sum();
        sum += mid;
        panels *= 2;
        h *= 0.5;
        let refined = h * sum;
        let change = (refined - estimate).abs();
        estimate = refined;
        if level >= 1 && change <= 1e-14 * refined.abs() {
            return Ok(peak + estimate.ln());
        }
    }
    Err(Error::Numeric(format!(
        "K_{order}({z}): trapezoid refinement stalled at {panels} panels, estimate {:e}",
        estimate * peak.exp()
    )))
}

/// Parameters of a multivariate Gaussian.
#[derive(Clone, Debug)]
pub struct MvnParams {
    mean: Vec<f64>,
    covariance: Matrix,
    chol: Cholesky,
}

fn check_spd(name: &str, m: &Matrix, dim: usize) -> Result<Cholesky> {
    if m.rows() != dim || m.cols() != dim {
        return Err(Error::Dimension(format!(
            "{name} is {}x{}, expected {dim}x{dim}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_symmetric(1e-10) {
        return Err(Error::Definiteness(format!("{name} is not symmetric")));
    }
    Cholesky::new(m)
}

impl MvnParams {
    pub fn new(mean: Vec<f64>, covariance: Matrix) -> Result<Self> {
        let chol = check_spd("covariance", &covariance, mean.len())?;
        Ok(Self { mean, covariance, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &Matrix {
        &self.covariance
    }

    pub fn cholesky(&self) -> &Cholesky {
        &self.chol
    }

    pub fn sample(&self, rng: &mut Rng, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    /// `mean + L·z` with `z` standard normal.
    pub fn sample_one(&self, rng: &mut Rng) -> Vec<f64> {
        let z: Vec<f64> = (0..self.dim()).map(|_| rng.standard_normal()).collect();
        let l = self.chol.factor();
        (0..self.dim())
            .map(|i| self.mean[i] + (0..=i).map(|k| l[(i, k)] * z[k]).sum::<f64>())
            .collect()
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        let r = residual(x, &self.mean)?;
        let q = self.chol.inv_quad_form(&r);
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + self.chol.log_det() + q))
    }
}

fn residual(x: &[f64], mean: &[f64]) -> Result<Vec<f64>> {
    if x.len() != mean.len() {
        return Err(Error::Dimension(format!(
            "point of length {} for a {}-dimensional law",
            x.len(),
            mean.len()
        )));
    }
    Ok(x.iter().zip(mean).map(|(a, b)| a - b).collect())
}

/// Inverse-CDF exponential draw with mean `lambda` from `u ∈ (0, 1]`.
pub fn exp_from_uniform(lambda: f64, u: f64) -> f64 {
    -lambda * u.ln()
}

/// `n` draws from the exponential law with mean `lambda`.
pub fn exp_sample(lambda: f64, rng: &mut Rng, n: usize) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    Ok((0..n).map(|_| exp_from_uniform(lambda, rng.uniform_open_closed())).collect())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!("λ must be positive, got {lambda}")));
    }
    Ok(())
}

/// Parameters of a multivariate Laplace law; the covariance is `λΓ`.
#[derive(Clone, Debug)]
pub struct MvLaplaceParams {
    mean: Vec<f64>,
    gamma: Matrix,
    lambda: f64,
    chol: Cholesky,
    log_norm: f64,
}

/// Serializable description of a multivariate Laplace law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvLaplaceSpec {
    pub mean: Vec<f64>,
    pub gamma: Matrix,
    pub lambda: f64,
}

impl MvLaplaceParams {
    pub fn new(mean: Vec<f64>, gamma: Matrix, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        let chol = check_spd("gamma", &gamma, mean.len())?;
        let m = mean.len() as f64;
        let log_norm = std::f64::consts::LN_2 - 0.5 * m * LN_2PI - lambda.ln() - 0.5 * chol.log_det();
        Ok(Self { mean, gamma, lambda, chol, log_norm })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn gamma(&self) -> &Matrix {
        &self.gamma
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `λΓ`.
    pub fn covariance(&self) -> Matrix {
        self.gamma.scale(self.lambda)
    }

    /// The same law with a different mean, reusing the factorisation.
    pub fn with_mean(&self, mean: Vec<f64>) -> Result<Self> {
        if mean.len() != self.dim() {
            return Err(Error::Dimension("mean length changed".into()));
        }
        Ok(Self { mean, ..self.clone() })
    }

    pub fn spec(&self) -> MvLaplaceSpec {
        MvLaplaceSpec { mean: self.mean.clone(), gamma: self.gamma.clone(), lambda: self.lambda }
    }

    /// `mean + g·√Φ`, one exponential `Φ` per vector.
    pub fn sample_one(&self, rng: &mut Rng) -> Vec<f64> {
        let l = self.chol.factor();
        let m = self.dim();
        let z: Vec<f64> = (0..m).map(|_| rng.standard_normal()).collect();
        let phi = exp_from_uniform(self.lambda, rng.uniform_open_closed());
        let s = phi.sqrt();
        (0..m)
            .map(|i| self.mean[i] + s * (0..=i).map(|k| l[(i, k)] * z[k]).sum::<f64>())
            .collect()
    }

    pub fn sample(&self, rng: &mut Rng, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        let r = residual(x, &self.mean)?;
        let q = self.chol.inv_quad_form(&r).max(QUAD_FORM_FLOOR);
        let m = self.dim() as f64;
        let order = 0.5 * m - 1.0;
        let arg = (2.0 * q / self.lambda).sqrt();
        Ok(self.log_norm + log_bessel_k(order.abs(), arg)?
            - 0.5 * order * (0.5 * self.lambda * q).ln())
    }
}

impl TryFrom<&MvLaplaceSpec> for MvLaplaceParams {
    type Error = Error;
    fn try_from(s: &MvLaplaceSpec) -> Result<Self> {
        MvLaplaceParams::new(s.mean.clone(), s.gamma.clone(), s.lambda)
    }
}

/// Sample mean and (unbiased) sample covariance of a set of vectors.
pub fn sample_moments(xs: &[Vec<f64>]) -> (Vec<f64>, Matrix) {
    let n = xs.len();
    let m = xs.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; m];
    for x in xs {
        mean.iter_mut().zip(x).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let mut cov = Matrix::zeros(m, m);
    for x in xs {
        for i in 0..m {
            for j in 0..m {
                cov[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    (mean, cov.scale(1.0 / denom))
}
