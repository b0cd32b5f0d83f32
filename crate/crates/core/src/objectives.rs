//! Training losses on batched network outputs.
//!
//! A residual `r = Y − μ̂` is a stack of `S` slices (one per timestamp and
//! coordinate), each an `m`-vector over agents. With per-agent scalars
//! `Φ̂ᵢ` the slice is rescaled to `r̃ᵢ = rᵢ/√Φ̂ᵢ`, and
//!
//! ```text
//! q      = Σₛ r̃ₛᵀ Σ̂⁻¹ r̃ₛ
//! lap-cu = ½ [ q + S·Σᵢ ln Φ̂ᵢ − S·Σᵢ ln dᵢᵢ ]       dᵢᵢ = diagonal of Σ̂⁻¹
//! nll    = ½ [ q + S·Σᵢ ln Φ̂ᵢ − S·ln det Σ̂⁻¹ ]
//! ```
//!
//! With one shared `Φ̂` this is `½[q/Φ̂ + m·S·ln Φ̂ − …]`. Hadamard's
//! inequality gives `ln det Σ̂⁻¹ ≤ Σᵢ ln dᵢᵢ`, so `lap-cu ≤ nll`, with
//! equality exactly for diagonal Σ̂⁻¹.
//!
//! Note that `lap-cu` has no interior minimiser in Σ̂⁻¹ when the residuals
//! are correlated: its off-diagonal gradient never vanishes, so it drives
//! Σ̂⁻¹ towards singularity. Set [`LossConfig::full_nll`] when the
//! covariance itself is the quantity of interest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::nets::BatchOutput;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WtaMode {
    /// The mode with the smallest summed displacement error.
    ClosestToGt,
    /// The mode with the smallest agent-mean `Φ̂`.
    PhiSelected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub wta: WtaMode,
    pub full_nll: bool,
    /// Replace per-agent `Φ̂` by its agent mean inside the likelihood.
    pub shared_phi: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 1.0, wta: WtaMode::ClosestToGt, full_nll: false, shared_phi: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Values of one loss evaluation, averaged over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lap_cu: f64,
    pub autl: f64,
    pub total: f64,
    /// Mean `q` of the winning modes.
    pub q_value: f64,
    /// `DE` per mode, stacked over the batch (`K × B·m`).
    pub de: Vec<Vec<f64>>,
    /// Winning mode per instance.
    pub winners: Vec<usize>,
}

/// Graph handles of a loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub lap_cu: Var,
    pub autl: Var,
}

fn blocks(g: &Graph, stacked: Var, batch: usize) -> Result<(usize, usize)> {
    let rows = g.shape(stacked)[0];
    if batch == 0 || !rows.is_multiple_of(batch) {
        return Err(Error::Dimension(format!("{rows} rows do not split into {batch} instances")));
    }
    Ok((rows / batch, g.shape(stacked)[1]))
}

/// Per-instance `Φ̂` replaced by its agent mean, same shape.
fn shared(g: &mut Graph, phi: Var, batch: usize, m: usize) -> Result<Var> {
    let per = g.reshape(phi, &[batch, m])?;
    let mean = g.mean(per, Some(1))?;
    let mean = g.reshape(mean, &[batch, 1])?;
    let rep = g.repeat_cols(mean, m)?;
    g.reshape(rep, &[batch * m, 1])
}

/// `q` per instance (vector of length `batch`).
///
/// `resid` is `B·m × S`, `phi` is `B·m × 1`, `sigma_inv` is `B·m × m`.
pub fn quad_form(g: &mut Graph, resid: Var, phi: Var, sigma_inv: Var, batch: usize) -> Result<Var> {
    let (m, s) = blocks(g, resid, batch)?;
    if g.shape(phi) != [batch * m, 1] || g.shape(sigma_inv) != [batch * m, m] {
        return Err(Error::Dimension(format!(
            "Φ̂ {:?} and Σ̂⁻¹ {:?} do not match {batch} instances of {m} agents",
            g.shape(phi),
            g.shape(sigma_inv)
        )));
    }
    if g.value(phi).data().iter().any(|&p| !(p > 0.0)) {
        return Err(Error::Domain("Φ̂ must be positive".into()));
    }
    let root = g.sqrt(phi)?;
    let root = g.repeat_cols(root, s)?;
    let scaled = g.div(resid, root)?;
    let gram = g.block_matmul(scaled, scaled, batch, true)?;
    let prod = g.mul(gram, sigma_inv)?;
    let per = g.reshape(prod, &[batch, m * m])?;
    g.sum(per, Some(1))
}

/// `S·Σᵢ ln Φ̂ᵢ` per instance.
fn log_phi_term(g: &mut Graph, phi: Var, batch: usize, m: usize, s: usize) -> Result<Var> {
    let lp = g.log(phi)?;
    let lp = g.reshape(lp, &[batch, m])?;
    let sum = g.sum(lp, Some(1))?;
    g.scale(sum, s as f64)
}

/// `Σᵢ ln dᵢᵢ` per instance.
fn log_diag_term(g: &mut Graph, sigma_inv: Var, batch: usize, m: usize) -> Result<Var> {
    let mut mask = vec![0.0; batch * m * m];
    for b in 0..batch {
        for i in 0..m {
            mask[(b * m + i) * m + i] = 1.0;
        }
    }
    let mask = g.constant(Tensor::matrix(batch * m, m, mask)?);
    let d = g.mul(sigma_inv, mask)?;
    let d = g.sum(d, Some(1))?;
    if g.value(d).data().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Domain("diagonal of Σ̂⁻¹ must be positive".into()));
    }
    let ld = g.log(d)?;
    let ld = g.reshape(ld, &[batch, m])?;
    g.sum(ld, Some(1))
}

fn likelihood(
    g: &mut Graph,
    resid: Var,
    phi: Var,
    sigma_inv: Var,
    batch: usize,
    full: bool,
) -> Result<(Var, Var)> {
    let (m, s) = blocks(g, resid, batch)?;
    let q = quad_form(g, resid, phi, sigma_inv, batch)?;
    let lphi = log_phi_term(g, phi, batch, m, s)?;
    let ldet = if full { g.block_log_det_spd(sigma_inv)? } else { log_diag_term(g, sigma_inv, batch, m)? };
    let ldet = g.scale(ldet, s as f64)?;
    let a = g.add(q, lphi)?;
    let b = g.sub(a, ldet)?;
    Ok((g.scale(b, 0.5)?, q))
}

/// Hadamard-bound loss per instance.
pub fn lap_cu_loss(g: &mut Graph, resid: Var, phi: Var, sigma_inv: Var, batch: usize) -> Result<Var> {
    Ok(likelihood(g, resid, phi, sigma_inv, batch, false)?.0)
}

/// Negative log-likelihood with the exact `ln det` per instance.
pub fn full_nll(g: &mut Graph, resid: Var, phi: Var, sigma_inv: Var, batch: usize) -> Result<Var> {
    Ok(likelihood(g, resid, phi, sigma_inv, batch, true)?.0)
}

/// Displacement error `‖μ̂ᵢ − Yᵢ‖₂` per stacked agent row.
pub fn displacement_error(g: &mut Graph, resid: Var) -> Result<Var> {
    let t = g.transpose(resid)?;
    g.col_norms(t)
}

/// `Σₖ Σᵢ |Φ̂ₖᵢ − DEₖᵢ|` per instance. `DE` enters as a fixed target.
pub fn autl(g: &mut Graph, resids: &[Var], phis: &[Var], batch: usize) -> Result<Var> {
    if resids.is_empty() || resids.len() != phis.len() {
        return Err(Error::Dimension("autl needs one Φ̂ per mode".into()));
    }
    let (m, _) = blocks(g, resids[0], batch)?;
    let mut acc: Option<Var> = None;
    for (&r, &p) in resids.iter().zip(phis) {
        let de = displacement_error(g, r)?;
        let de = g.detach(de);
        let de = g.reshape(de, &[batch * m, 1])?;
        let diff = g.sub(p, de)?;
        let a = g.abs(diff)?;
        let a = g.reshape(a, &[batch, m])?;
        let per = g.sum(a, Some(1))?;
        acc = Some(match acc {
            Some(prev) => g.add(prev, per)?,
            None => per,
        });
    }
    Ok(acc.expect("at least one mode"))
}

/// Winner-takes-all mode per instance, lowest index on ties.
fn winners(g: &Graph, mode: WtaMode, de: &[Var], phi: &[Var], batch: usize, m: usize) -> Vec<usize> {
    let score = |k: usize, b: usize| -> f64 {
        let v = match mode {
            WtaMode::ClosestToGt => g.value(de[k]).data(),
            WtaMode::PhiSelected => g.value(phi[k]).data(),
        };
        v[b * m..(b + 1) * m].iter().sum()
    };
    (0..batch)
        .map(|b| {
            let mut best = 0;
            for k in 1..de.len() {
                if score(k, b) < score(best, b) {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// `L_total = L_lap-cu + α·L_AUTL`, both averaged over the batch.
///
/// The likelihood term uses only the winning mode of each instance; AUTL
/// runs over all modes.
pub fn total_loss(
    config: &LossConfig,
    g: &mut Graph,
    out: &BatchOutput,
    targets: Var,
) -> Result<(LossVars, LossBreakdown)> {
    config.validate()?;
    let batch = out.batch;
    let (m, _) = blocks(g, targets, batch)?;
    let resids: Vec<Var> = out.means.iter().map(|&mu| g.sub(targets, mu)).collect::<Result<_>>()?;
    let de: Vec<Var> = resids.iter().map(|&r| displacement_error(g, r)).collect::<Result<_>>()?;
    let win = winners(g, config.wta, &de, &out.phi, batch, m);

    let mut lap: Option<Var> = None;
    let mut q_sum = 0.0;
    for k in 0..out.means.len() {
        if !win.contains(&k) {
            continue;
        }
        let phi = if config.shared_phi { shared(g, out.phi[k], batch, m)? } else { out.phi[k] };
        let (l, q) = likelihood(g, resids[k], phi, out.sigma_inv[k], batch, config.full_nll)?;
        let mask: Vec<f64> = win.iter().map(|&w| if w == k { 1.0 } else { 0.0 }).collect();
        q_sum += g.value(q).data().iter().zip(&mask).map(|(a, b)| a * b).sum::<f64>();
        let mask = g.constant(Tensor::vector(&mask)?);
        let l = g.mul(l, mask)?;
        let l = g.sum(l, None)?;
        lap = Some(match lap {
            Some(prev) => g.add(prev, l)?,
            None => l,
        });
    }
    let lap = lap.expect("every instance has a winner");
    let lap = g.scale(lap, 1.0 / batch as f64)?;
    let au = autl(g, &resids, &out.phi, batch)?;
    let au = g.mean(au, None)?;
    let weighted = g.scale(au, config.alpha)?;
    let total = g.add(lap, weighted)?;
    let breakdown = LossBreakdown {
        lap_cu: g.value(lap).item(),
        autl: g.value(au).item(),
        total: g.value(total).item(),
        q_value: q_sum / batch as f64,
        de: de.iter().map(|&d| g.value(d).data().to_vec()).collect(),
        winners: win,
    };
    Ok((LossVars { total, lap_cu: lap, autl: au }, breakdown))
}

/// `Σ = D^½ (Σ̂⁻¹)⁻¹ D^½` with `D = diag(Φ̂)`; equals `Φ̂·Σ̂` for a shared `Φ̂`.
pub fn recover_covariance(phi: &[f64], sigma_inv: &Matrix) -> Result<Matrix> {
    let m = sigma_inv.rows();
    if phi.len() != m || !sigma_inv.is_square() {
        return Err(Error::Dimension(format!("{} Φ̂ values for a {m}x{} matrix", phi.len(), sigma_inv.cols())));
    }
    if phi.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::Domain("Φ̂ must be positive".into()));
    }
    let inv = Cholesky::new(sigma_inv)?.inverse();
    let mut out = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            out[(i, j)] = (phi[i] * phi[j]).sqrt() * inv[(i, j)];
        }
    }
    Ok(out)
}

/// The `Φ` that minimises `½[q/Φ + m·S·ln Φ]`.
pub fn optimal_shared_phi(q: f64, m: usize, slices: usize) -> f64 {
    q / (m * slices) as f64
}

/// Numerical check that `f(Φ) = Φ^(−m/2)·e^(−g/Φ)` peaks at `2g/m`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiStarCheck {
    pub analytic: f64,
    pub grid: f64,
    pub refined: f64,
    /// `f` at `10^∓8` times the peak location, relative to the peak.
    pub tail_ratio: f64,
}

impl PhiStarCheck {
    pub fn agrees(&self, tol: f64) -> bool {
        (self.refined - self.analytic).abs() <= tol * self.analytic.max(1.0) && self.tail_ratio < 1e-6
    }
}

fn log_f(phi: f64, g: f64, m: usize) -> f64 {
    -(m as f64 / 2.0) * phi.ln() - g / phi
}

/// Golden-section search for the maximiser of a unimodal `f` on `[a, b]`.
pub fn golden_section_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

pub fn phi_star_sanity(g: f64, m: usize) -> Result<PhiStarCheck> {
    if !(g > 0.0) || m == 0 {
        return Err(Error::Domain(format!("need g > 0 and m ≥ 1, got g={g}, m={m}")));
    }
    let analytic = 2.0 * g / m as f64;
    let (lo, hi) = (analytic * 1e-3, analytic * 1e3);
    let n = 4000;
    let step = (hi / lo).ln() / n as f64;
    let grid_pts: Vec<f64> = (0..=n).map(|i| lo * (step * i as f64).exp()).collect();
    let (mut best, mut best_v) = (0, f64::NEG_INFINITY);
    for (i, &x) in grid_pts.iter().enumerate() {
        let v = log_f(x, g, m);
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    let a = grid_pts[best.saturating_sub(1)];
    let b = grid_pts[(best + 1).min(n)];
    let refined = golden_section_max(|x| log_f(x, g, m), a, b, 1e-12 * analytic.max(1.0));
    let tail = log_f(analytic * 1e-8, g, m).max(log_f(analytic * 1e8, g, m)) - best_v;
    Ok(PhiStarCheck { analytic, grid: grid_pts[best], refined, tail_ratio: tail.exp() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::gradcheck;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    fn eval(
        f: fn(&mut Graph, Var, Var, Var, usize) -> Result<Var>,
        r: Tensor,
        p: Tensor,
        s: Tensor,
        batch: usize,
    ) -> Vec<f64> {
        let mut g = Graph::new();
        let (r, p, s) = (g.constant(r), g.constant(p), g.constant(s));
        let v = f(&mut g, r, p, s, batch).unwrap();
        g.value(v).data().to_vec()
    }

    #[test]
    fn quad_form_examples() {
        // two agents, three slices, residual (1,0) in every slice
        let r = t(2, 3, &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let q = eval(quad_form, r.clone(), t(2, 1, &[1.0, 1.0]), t(2, 2, &[1.0, 0.0, 0.0, 1.0]), 1);
        assert_eq!(q, vec![3.0]);
        let q = eval(quad_form, Tensor::zeros(&[2, 3]), t(2, 1, &[1.0, 1.0]), t(2, 2, &[2.0, 1.0, 1.0, 2.0]), 1);
        assert_eq!(q, vec![0.0]);
    }

    #[test]
    fn quad_form_matches_triple_loop() {
        let mut rng = Rng::new(4);
        let (b, m, s) = (3, 4, 5);
        let r: Vec<f64> = (0..b * m * s).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let phi: Vec<f64> = (0..b * m).map(|_| rng.uniform_range(0.5, 2.0)).collect();
        let mut sig = vec![0.0; b * m * m];
        for k in 0..b {
            let a = crate::datagen::random_spd(m, 0.5, 3.0, &mut rng);
            sig[k * m * m..(k + 1) * m * m].copy_from_slice(a.data());
        }
        let q = eval(quad_form, t(b * m, s, &r), t(b * m, 1, &phi), t(b * m, m, &sig), b);
        for k in 0..b {
            let mut want = 0.0;
            for sl in 0..s {
                for i in 0..m {
                    for j in 0..m {
                        let ri = r[(k * m + i) * s + sl] / phi[k * m + i].sqrt();
                        let rj = r[(k * m + j) * s + sl] / phi[k * m + j].sqrt();
                        want += ri * sig[k * m * m + i * m + j] * rj;
                    }
                }
            }
            assert!((q[k] - want).abs() < 1e-10 * want.abs().max(1.0));
        }
    }

    #[test]
    fn lap_cu_examples() {
        let r = t(2, 1, &[1.0, 0.0]);
        let one = t(2, 1, &[1.0, 1.0]);
        let eye = t(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(eval(lap_cu_loss, r.clone(), one.clone(), eye.clone(), 1), vec![0.5]);
        assert_eq!(eval(full_nll, r, one.clone(), eye.clone(), 1), vec![0.5]);
        assert_eq!(eval(lap_cu_loss, Tensor::zeros(&[2, 1]), one, eye, 1), vec![0.0]);
    }

    #[test]
    fn full_nll_log_det() {
        let zero = Tensor::zeros(&[2, 1]);
        let one = t(2, 1, &[1.0, 1.0]);
        let v = eval(full_nll, zero, one, t(2, 2, &[2.0, 1.0, 1.0, 2.0]), 1);
        assert!((v[0] + 0.5 * 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn hadamard_bound_and_equality() {
        let mut rng = Rng::new(10);
        for _ in 0..200 {
            let m = 2 + rng.below(4);
            let s = 1 + rng.below(4);
            let r = Tensor::matrix(m, s, (0..m * s).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).unwrap();
            let p = Tensor::matrix(m, 1, (0..m).map(|_| rng.uniform_range(0.2, 3.0)).collect()).unwrap();
            let a = crate::datagen::random_spd(m, 0.1, 5.0, &mut rng);
            let sig = Tensor::matrix(m, m, a.data().to_vec()).unwrap();
            let lo = eval(lap_cu_loss, r.clone(), p.clone(), sig.clone(), 1)[0];
            let hi = eval(full_nll, r.clone(), p.clone(), sig, 1)[0];
            assert!(lo <= hi + 1e-10);
            let diag = Tensor::matrix(m, m, Matrix::diagonal(&a.diag()).into_data()).unwrap();
            let lo = eval(lap_cu_loss, r.clone(), p.clone(), diag.clone(), 1)[0];
            let hi = eval(full_nll, r, p, diag, 1)[0];
            assert!((lo - hi).abs() <= 1e-10);
        }
    }

    #[test]
    fn autl_examples_and_gradient_sign() {
        let mut g = Graph::new();
        // K=1, m=1, residual with norm 2, Φ̂ = 5
        let r = g.constant(t(1, 2, &[2.0, 0.0]));
        let p = g.leaf(t(1, 1, &[5.0]));
        let a = autl(&mut g, &[r], &[p], 1).unwrap();
        assert_eq!(g.value(a).data(), &[3.0]);
        let l = g.sum(a, None).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[1.0]);

        let mut g = Graph::new();
        let r = g.constant(t(1, 2, &[0.6, 0.8]));
        let p = g.constant(t(1, 1, &[1.0]));
        let a = autl(&mut g, &[r], &[p], 1).unwrap();
        assert!(g.value(a).data()[0].abs() < 1e-15);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = Rng::new(77);
        for trial in 0..10 {
            let (b, m, s) = (2, 3, 4);
            let r = Tensor::matrix(b * m, s, (0..b * m * s).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).unwrap();
            let p = Tensor::matrix(b * m, 1, (0..b * m).map(|_| rng.uniform_range(0.3, 2.0)).collect()).unwrap();
            let e = Tensor::matrix(b * m, 2, (0..b * m * 2).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
            let full = trial % 2 == 0;
            let check = gradcheck(
                |g, x| {
                    let gram = g.block_matmul(x[2], x[2], b, true)?;
                    let mut eye = vec![0.0; b * m * m];
                    for k in 0..b * m {
                        eye[k * m + k % m] = 0.5;
                    }
                    let eye = g.constant(Tensor::matrix(b * m, m, eye)?);
                    let sig = g.add(gram, eye)?;
                    let l = if full { full_nll(g, x[0], x[1], sig, b)? } else { lap_cu_loss(g, x[0], x[1], sig, b)? };
                    g.sum(l, None)
                },
                &[r, p, e],
                1e-6,
                1e-2,
            )
            .unwrap();
            assert!(check.max_rel_error < 1e-4, "{check:?}");
        }
    }

    #[test]
    fn recover_covariance_examples() {
        let s = recover_covariance(&[2.0, 2.0], &Matrix::identity(2)).unwrap();
        assert_eq!(s, Matrix::identity(2).scale(2.0));

        let a = Matrix::from_rows(&[&[3.0, 1.0], &[1.0, 2.0]]);
        let s = recover_covariance(&[1.5, 1.5], &a).unwrap();
        assert!(s.matmul(&a).unwrap().max_abs_diff(&Matrix::identity(2).scale(1.5)) < 1e-9);
        // adjugate: inverse of [[a,b],[b,d]] is [[d,-b],[-b,a]]/(ad-b²)
        let det = 3.0 * 2.0 - 1.0;
        let want = Matrix::from_rows(&[&[2.0, -1.0], &[-1.0, 3.0]]).scale(1.5 / det);
        assert!(s.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn phi_star_examples() {
        let c = phi_star_sanity(1.0, 2).unwrap();
        assert!((c.refined - 1.0).abs() < 1e-6 && c.agrees(1e-6), "{c:?}");
        let c = phi_star_sanity(3.0, 4).unwrap();
        assert!((c.refined - 1.5).abs() < 1e-6 && c.agrees(1e-6));
        let f = |x: f64| log_f(x, 3.0, 4);
        assert!(f(c.refined) > f(c.refined + 0.1) && f(c.refined) > f(c.refined - 0.1));
    }

    #[test]
    fn lap_cu_minimised_at_stationary_phi() {
        // shared Φ̂: ½[q/Φ + m·S·ln Φ] over Φ, q fixed
        let (m, s) = (4, 3);
        let mut g = Graph::new();
        let r = Tensor::matrix(m, s, (0..m * s).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let rv = g.constant(r);
        let one = g.constant(Tensor::full(&[m, 1], 1.0));
        let eye = g.constant(Tensor::matrix(m, m, Matrix::identity(m).into_data()).unwrap());
        let q0 = quad_form(&mut g, rv, one, eye, 1).unwrap();
        let q = g.value(q0).item();
        let loss = |phi: f64| 0.5 * (q / phi + (m * s) as f64 * phi.ln());
        let best = golden_section_max(|x| -loss(x), 1e-4, 100.0, 1e-12);
        assert!((best - optimal_shared_phi(q, m, s)).abs() < 1e-6);
    }

    #[test]
    fn alpha_validation() {
        let c = LossConfig { alpha: -1.0, ..LossConfig::default() };
        assert!(c.validate().is_err());
    }

    fn two_mode_output(g: &mut Graph, sigma_second: f64) -> (BatchOutput, Var) {
        // one instance, m=2, S=2; mode 0 is exact, mode 1 is off by one
        let y = g.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let mu0 = g.leaf(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let mu1 = g.leaf(t(2, 2, &[2.0, 3.0, 4.0, 5.0]));
        let p0 = g.leaf(t(2, 1, &[0.5, 0.7]));
        let p1 = g.leaf(t(2, 1, &[0.2, 0.3]));
        let s0 = g.leaf(t(2, 2, &[2.0, 0.5, 0.5, 1.0]));
        let s1 = g.leaf(t(2, 2, &[sigma_second, 0.0, 0.0, 1.0]));
        let feat = g.constant(Tensor::zeros(&[2, 1]));
        (BatchOutput { batch: 1, feat, means: vec![mu0, mu1], phi: vec![p0, p1], sigma_inv: vec![s0, s1] }, y)
    }

    #[test]
    fn total_loss_gating_and_alpha() {
        let cfg = LossConfig { alpha: 0.0, ..LossConfig::default() };
        let mut g = Graph::new();
        let (out, y) = two_mode_output(&mut g, 1.0);
        let (_, a) = total_loss(&cfg, &mut g, &out, y).unwrap();
        assert_eq!(a.total, a.lap_cu);
        assert!(a.autl > 0.0);
        assert_eq!(a.winners, vec![0]);

        let mut g = Graph::new();
        let (out, y) = two_mode_output(&mut g, 9.0);
        let (_, b) = total_loss(&cfg, &mut g, &out, y).unwrap();
        assert_eq!(a.lap_cu, b.lap_cu);

        let cfg = LossConfig { wta: WtaMode::PhiSelected, alpha: 0.5, ..LossConfig::default() };
        let mut g = Graph::new();
        let (out, y) = two_mode_output(&mut g, 1.0);
        let (_, c) = total_loss(&cfg, &mut g, &out, y).unwrap();
        assert_eq!(c.winners, vec![1]);
        assert!((c.total - (c.lap_cu + 0.5 * c.autl)).abs() < 1e-12);

        // d(total)/dα equals the autl value
        let at = |alpha: f64| {
            let cfg = LossConfig { alpha, ..LossConfig::default() };
            let mut g = Graph::new();
            let (out, y) = two_mode_output(&mut g, 1.0);
            total_loss(&cfg, &mut g, &out, y).unwrap().1
        };
        let (lo, hi) = (at(0.3), at(0.3 + 1e-3));
        assert!(((hi.total - lo.total) / 1e-3 - lo.autl).abs() < 1e-9);
    }

    #[test]
    fn single_mode_wta_is_identity() {
        let mut g = Graph::new();
        let (mut out, y) = two_mode_output(&mut g, 1.0);
        out.means.truncate(1);
        out.phi.truncate(1);
        out.sigma_inv.truncate(1);
        for wta in [WtaMode::ClosestToGt, WtaMode::PhiSelected] {
            let cfg = LossConfig { wta, ..LossConfig::default() };
            let (vars, b) = total_loss(&cfg, &mut g, &out, y).unwrap();
            assert_eq!(b.winners, vec![0]);
            g.backward(vars.total).unwrap();
        }
    }
}
