//! Evaluation quantities.
//!
//! Toy problem: ℓ2 error of the mean, ℓ1 errors of the covariance and of
//! its inverse (entry means), and the KL divergence between the generating
//! and the estimated Laplace laws. Forecasting: ADE/FDE and their
//! selected-mode, best-of-K and Brier-weighted variants, plus the
//! stochasticity score and its rank correlation with predicted uncertainty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};
use crate::rng::Rng;
use crate::stats::{MvLaplaceParams, MvnParams};

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl McEstimate {
    fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Self { mean, stderr: (var / n as f64).sqrt(), n }
    }
}

/// Mean pointwise ℓ2 distance between two trajectories in instance layout
/// (`2T × m`, x and y interleaved).
pub fn l2_points(est: &Matrix, gt: &Matrix) -> Result<f64> {
    same_shape(est, gt)?;
    let (steps, m) = (est.rows() / 2, est.cols());
    if steps == 0 || m == 0 {
        return Err(Error::Dimension("empty trajectory".into()));
    }
    let mut s = 0.0;
    for t in 0..steps {
        for i in 0..m {
            let dx = est[(2 * t, i)] - gt[(2 * t, i)];
            let dy = est[(2 * t + 1, i)] - gt[(2 * t + 1, i)];
            s += dx.hypot(dy);
        }
    }
    Ok(s / (steps * m) as f64)
}

/// Mean absolute entry difference.
pub fn l1_entries(a: &Matrix, b: &Matrix) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data().len().max(1);
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64)
}

fn same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Dimension(format!(
            "{}x{} against {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// Toy metrics of one instance, without KL.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyErrors {
    pub l2_mu: f64,
    pub l1_sigma: f64,
    pub l1_sigma_inv: f64,
}

/// `sigma_hat` and `sigma_gt` are covariances (not scale matrices).
pub fn toy_errors(mu_hat: &Matrix, sigma_hat: &Matrix, mu_gt: &Matrix, sigma_gt: &Matrix) -> Result<ToyErrors> {
    let inv = |s: &Matrix| Ok::<_, Error>(Cholesky::new(s)?.inverse());
    Ok(ToyErrors {
        l2_mu: l2_points(mu_hat, mu_gt)?,
        l1_sigma: l1_entries(sigma_hat, sigma_gt)?,
        l1_sigma_inv: l1_entries(&inv(sigma_hat)?, &inv(sigma_gt)?)?,
    })
}

/// Averages over a test set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub l2_mu: f64,
    pub l1_sigma: f64,
    pub l1_sigma_inv: f64,
    pub kl: f64,
    /// Standard error of `kl` over all Monte-Carlo draws.
    pub kl_stderr: f64,
    pub instances: usize,
    /// Set when `kl` falls below −0.01, beyond plausible sampling noise.
    pub kl_negative_flag: bool,
}

/// Accumulates per-instance toy results.
#[derive(Clone, Debug, Default)]
pub struct ToyAccumulator {
    sum: [f64; 4],
    var_kl: f64,
    n: usize,
}

impl ToyAccumulator {
    pub fn push(&mut self, errors: ToyErrors, kl: McEstimate) {
        self.sum[0] += errors.l2_mu;
        self.sum[1] += errors.l1_sigma;
        self.sum[2] += errors.l1_sigma_inv;
        self.sum[3] += kl.mean;
        self.var_kl += kl.stderr * kl.stderr;
        self.n += 1;
    }

    pub fn finish(&self) -> Result<ToyReport> {
        if self.n == 0 {
            return Err(Error::Contract("no instances evaluated".into()));
        }
        let n = self.n as f64;
        let kl = self.sum[3] / n;
        Ok(ToyReport {
            l2_mu: self.sum[0] / n,
            l1_sigma: self.sum[1] / n,
            l1_sigma_inv: self.sum[2] / n,
            kl,
            kl_stderr: self.var_kl.sqrt() / n,
            instances: self.n,
            kl_negative_flag: kl < -0.01,
        })
    }
}

/// Closed-form `KL(p_g ‖ p_e)` between Gaussians.
pub fn kl_gaussian(pg: &MvnParams, pe: &MvnParams) -> Result<f64> {
    let k = pg.dim();
    if pe.dim() != k {
        return Err(Error::Dimension(format!("dimensions {k} and {}", pe.dim())));
    }
    let ce = pe.cholesky();
    let inv = ce.inverse();
    let trace: f64 = (0..k).map(|i| (0..k).map(|j| inv[(i, j)] * pg.covariance()[(j, i)]).sum::<f64>()).sum();
    let d: Vec<f64> = pg.mean().iter().zip(pe.mean()).map(|(a, b)| a - b).collect();
    let maha = ce.inv_quad_form(&d);
    let kl = 0.5 * (ce.log_det() - pg.cholesky().log_det() - k as f64 + maha + trace);
    Ok(kl.max(0.0))
}

/// `(1/n)·Σ [ln p_g(xᵢ) − ln p_e(xᵢ)]` over `xᵢ ∼ p_g`.
pub fn kl_laplace_mc(pg: &MvLaplaceParams, pe: &MvLaplaceParams, n: usize, rng: &mut Rng) -> Result<McEstimate> {
    if pg.dim() != pe.dim() {
        return Err(Error::Dimension(format!("dimensions {} and {}", pg.dim(), pe.dim())));
    }
    if n < 2 {
        return Err(Error::Contract("Monte-Carlo KL needs at least two draws".into()));
    }
    let mut xs = Vec::with_capacity(n);
    for _ in 0..n {
        let x = pg.sample_one(rng);
        xs.push(pg.log_pdf(&x)? - pe.log_pdf(&x)?);
    }
    Ok(McEstimate::from_samples(&xs))
}

/// KL between two slice-wise Laplace laws sharing one scale matrix each and
/// differing in the mean of every slice. Slices are drawn uniformly, so the
/// estimate is the slice-averaged divergence.
///
/// `mu_g` and `mu_e` are `S × m`; the parameter means are ignored.
pub fn kl_laplace_slices(
    pg: &MvLaplaceParams,
    mu_g: &Matrix,
    pe: &MvLaplaceParams,
    mu_e: &Matrix,
    n: usize,
    rng: &mut Rng,
) -> Result<McEstimate> {
    same_shape(mu_g, mu_e)?;
    let m = pg.dim();
    if mu_g.cols() != m || pe.dim() != m || mu_g.rows() == 0 {
        return Err(Error::Dimension("slice means do not match the laws".into()));
    }
    if n < 2 {
        return Err(Error::Contract("Monte-Carlo KL needs at least two draws".into()));
    }
    let zg = pg.with_mean(vec![0.0; m])?;
    let ze = pe.with_mean(vec![0.0; m])?;
    let mut xs = Vec::with_capacity(n);
    let mut shifted = vec![0.0; m];
    for _ in 0..n {
        let s = rng.below(mu_g.rows());
        let x = zg.sample_one(rng);
        for i in 0..m {
            shifted[i] = x[i] + mu_g[(s, i)] - mu_e[(s, i)];
        }
        xs.push(zg.log_pdf(&x)? - ze.log_pdf(&shifted)?);
    }
    Ok(McEstimate::from_samples(&xs))
}

/// Forecasting metrics of one instance (or averaged over many).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    /// Mean over modes, i.e. the expected error of a uniformly random mode.
    pub ade: f64,
    pub fde: f64,
    /// Selected mode.
    pub ade1: f64,
    pub fde1: f64,
    /// Best mode per agent.
    pub adek: f64,
    pub fdek: f64,
    pub brier_fdek: f64,
    pub k_used: usize,
}

impl ForecastReport {
    pub fn mean(reports: &[ForecastReport]) -> Result<ForecastReport> {
        if reports.is_empty() {
            return Err(Error::Contract("no reports to average".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&ForecastReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(ForecastReport {
            ade: avg(|r| r.ade),
            fde: avg(|r| r.fde),
            ade1: avg(|r| r.ade1),
            fde1: avg(|r| r.fde1),
            adek: avg(|r| r.adek),
            fdek: avg(|r| r.fdek),
            brier_fdek: avg(|r| r.brier_fdek),
            k_used: reports[0].k_used,
        })
    }
}

/// Per-agent (ADE, FDE) of one trajectory against the truth.
fn agent_errors(pred: &Matrix, y: &Matrix, agent: usize) -> (f64, f64) {
    let steps = y.rows() / 2;
    let d = |t: usize| {
        (pred[(2 * t, agent)] - y[(2 * t, agent)]).hypot(pred[(2 * t + 1, agent)] - y[(2 * t + 1, agent)])
    };
    let ade = (0..steps).map(d).sum::<f64>() / steps as f64;
    (ade, d(steps - 1))
}

/// `means` holds `K` predictions, `selected` the assembled selected-mode
/// prediction and `probs` optional mode probabilities for Brier-FDE.
pub fn forecast_metrics(
    means: &[Matrix],
    selected: &Matrix,
    y: &Matrix,
    probs: Option<&[f64]>,
) -> Result<ForecastReport> {
    let k = means.len();
    if k == 0 {
        return Err(Error::Dimension("no modes".into()));
    }
    for mm in means.iter().chain(std::iter::once(selected)) {
        same_shape(mm, y)?;
    }
    if y.rows() < 2 || y.cols() == 0 {
        return Err(Error::Dimension("empty future".into()));
    }
    if let Some(p) = probs {
        let total: f64 = p.iter().sum();
        if p.len() != k || p.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("mode probabilities {p:?} are not a distribution over {k} modes")));
        }
    }
    let m = y.cols();
    let mut r = ForecastReport { k_used: k, ..ForecastReport::default() };
    for i in 0..m {
        let per_mode: Vec<(f64, f64)> = means.iter().map(|mu| agent_errors(mu, y, i)).collect();
        r.ade += per_mode.iter().map(|e| e.0).sum::<f64>() / k as f64;
        r.fde += per_mode.iter().map(|e| e.1).sum::<f64>() / k as f64;
        let (a1, f1) = agent_errors(selected, y, i);
        r.ade1 += a1;
        r.fde1 += f1;
        r.adek += per_mode.iter().map(|e| e.0).fold(f64::INFINITY, f64::min);
        let mut best = 0;
        for j in 1..k {
            if per_mode[j].1 < per_mode[best].1 {
                best = j;
            }
        }
        r.fdek += per_mode[best].1;
        let p = probs.map_or(1.0 / k as f64, |p| p[best]);
        r.brier_fdek += per_mode[best].1 + (1.0 - p).powi(2);
    }
    let mf = m as f64;
    r.ade /= mf;
    r.fde /= mf;
    r.ade1 /= mf;
    r.fde1 /= mf;
    r.adek /= mf;
    r.fdek /= mf;
    r.brier_fdek /= mf;
    Ok(r)
}

/// `softmax(−mean_i Φ̂ₖᵢ)` over modes.
pub fn mode_probs(phi: &[Vec<f64>]) -> Vec<f64> {
    let scores: Vec<f64> = phi.iter().map(|p| -p.iter().sum::<f64>() / p.len().max(1) as f64).collect();
    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Element-wise unbiased variance across modes, then the element mean.
pub fn stochasticity(modes: &[&[f64]]) -> Result<f64> {
    let k = modes.len();
    if k < 2 {
        return Err(Error::Contract(format!("stochasticity needs at least two modes, got {k}")));
    }
    let n = modes[0].len();
    if n == 0 || modes.iter().any(|v| v.len() != n) {
        return Err(Error::Dimension("modes must be non-empty and equally long".into()));
    }
    let mut total = 0.0;
    for e in 0..n {
        let mean = modes.iter().map(|v| v[e]).sum::<f64>() / k as f64;
        total += modes.iter().map(|v| (v[e] - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    }
    Ok(total / n as f64)
}

/// [`stochasticity`] over every entry of a multi-modal instance prediction.
pub fn instance_stochasticity(means: &[Matrix]) -> Result<f64> {
    let views: Vec<&[f64]> = means.iter().map(Matrix::data).collect();
    stochasticity(&views)
}

/// Rank correlation; `defined` is false when either series is constant,
/// in which case `rho` is reported as 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    pub defined: bool,
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<Spearman> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Dimension(format!("spearman of {} and {} values", x.len(), y.len())));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Spearman { rho: 0.0, defined: false });
    }
    Ok(Spearman { rho: sxy / (sxx * syy).sqrt(), defined: true })
}

/// Equal-count bins of (stochasticity, uncertainty) pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticityCurve {
    /// `(mean stochasticity, mean uncertainty, count)` per bin, ordered by
    /// stochasticity.
    pub bins: Vec<(f64, f64, usize)>,
    pub spearman: Spearman,
}

pub fn stochasticity_curve(stoch: &[f64], uncertainty: &[f64], bins: usize) -> Result<StochasticityCurve> {
    let sp = spearman(stoch, uncertainty)?;
    if bins == 0 {
        return Err(Error::Contract("need at least one bin".into()));
    }
    let mut idx: Vec<usize> = (0..stoch.len()).collect();
    idx.sort_by(|&a, &b| stoch[a].total_cmp(&stoch[b]));
    let n = idx.len();
    let out = (0..bins.min(n))
        .map(|b| {
            let (lo, hi) = (b * n / bins.min(n), (b + 1) * n / bins.min(n));
            let part = &idx[lo..hi];
            let c = part.len() as f64;
            (
                part.iter().map(|&i| stoch[i]).sum::<f64>() / c,
                part.iter().map(|&i| uncertainty[i]).sum::<f64>() / c,
                part.len(),
            )
        })
        .collect();
    Ok(StochasticityCurve { bins: out, spearman: sp })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_errors_examples() {
        let mu = Matrix::new(4, 2, (0..8).map(f64::from).collect()).unwrap();
        let s = Matrix::from_rows(&[&[2.0, 0.5], &[0.5, 1.0]]);
        let e = toy_errors(&mu, &s, &mu, &s).unwrap();
        assert_eq!(e, ToyErrors { l2_mu: 0.0, l1_sigma: 0.0, l1_sigma_inv: 0.0 });

        let g = crate::datagen::random_spd(4, 0.5, 2.0, &mut Rng::new(1));
        let shifted = g.add(&Matrix::new(4, 4, vec![0.1; 16]).unwrap()).unwrap();
        assert!((l1_entries(&shifted, &g).unwrap() - 0.1).abs() < 1e-15);

        // (3,4) offset on every point
        let mut off = mu.clone();
        for r in 0..2 {
            for c in 0..2 {
                off[(2 * r, c)] += 3.0;
                off[(2 * r + 1, c)] += 4.0;
            }
        }
        assert!((l2_points(&off, &mu).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn kl_gaussian_examples() {
        let p = MvnParams::new(vec![0.0], Matrix::identity(1)).unwrap();
        let q = MvnParams::new(vec![1.0], Matrix::identity(1)).unwrap();
        assert_eq!(kl_gaussian(&p, &p).unwrap(), 0.0);
        assert!((kl_gaussian(&p, &q).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_gaussian_matches_monte_carlo() {
        let mut rng = Rng::new(21);
        let pg = MvnParams::new(vec![0.3, -0.2, 0.1], crate::datagen::random_spd(3, 0.5, 2.0, &mut rng)).unwrap();
        let pe = MvnParams::new(vec![0.0, 0.1, 0.4], crate::datagen::random_spd(3, 0.4, 3.0, &mut rng)).unwrap();
        let closed = kl_gaussian(&pg, &pe).unwrap();
        let n = 200_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let x = pg.sample_one(&mut rng);
                pg.log_pdf(&x).unwrap() - pe.log_pdf(&x).unwrap()
            })
            .collect();
        let est = McEstimate::from_samples(&xs);
        assert!((est.mean - closed).abs() < 3.0 * est.stderr, "{closed} vs {est:?}");
    }

    #[test]
    fn kl_laplace_self_and_gibbs() {
        let mut rng = Rng::new(3);
        let p = MvLaplaceParams::new(vec![0.0; 2], Matrix::identity(2), 1.0).unwrap();
        let e = kl_laplace_mc(&p, &p, 2000, &mut rng).unwrap();
        assert!(e.mean.abs() <= 3.0 * e.stderr + 1e-15);
        for _ in 0..5 {
            let g = crate::datagen::random_spd(2, 0.3, 2.0, &mut rng);
            let q = MvLaplaceParams::new(vec![0.2, -0.1], g, 1.5).unwrap();
            let e = kl_laplace_mc(&p, &q, 4000, &mut rng).unwrap();
            assert!(e.mean > -3.0 * e.stderr);
        }
    }

    #[test]
    fn kl_laplace_stderr_shrinks_with_n() {
        let p = MvLaplaceParams::new(vec![0.0; 2], Matrix::identity(2), 1.0).unwrap();
        let q = MvLaplaceParams::new(vec![0.5, 0.0], Matrix::identity(2).scale(2.0), 1.0).unwrap();
        let a = kl_laplace_mc(&p, &q, 10_000, &mut Rng::new(1)).unwrap();
        let b = kl_laplace_mc(&p, &q, 40_000, &mut Rng::new(2)).unwrap();
        let ratio = a.stderr / b.stderr;
        assert!((ratio - 2.0).abs() < 0.6, "{ratio}");
    }

    #[test]
    fn kl_laplace_1d_matches_quadrature() {
        let pg = MvLaplaceParams::new(vec![0.0], Matrix::identity(1), 2.0).unwrap();
        let pe = MvLaplaceParams::new(vec![0.5], Matrix::identity(1).scale(0.5), 3.0).unwrap();
        let n = 200_000;
        let h = 100.0 / n as f64;
        let mut oracle = 0.0;
        for i in 0..=n {
            let x = -50.0 + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            let lg = pg.log_pdf(&[x]).unwrap();
            oracle += w * h * lg.exp() * (lg - pe.log_pdf(&[x]).unwrap());
        }
        let e = kl_laplace_mc(&pg, &pe, 20_000, &mut Rng::new(5)).unwrap();
        assert!((e.mean - oracle).abs() < 3.0 * e.stderr, "{oracle} vs {e:?}");
    }

    #[test]
    fn slice_kl_of_identical_laws_is_zero() {
        let p = MvLaplaceParams::new(vec![0.0; 2], Matrix::identity(2), 1.0).unwrap();
        let mu = Matrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let e = kl_laplace_slices(&p, &mu, &p, &mu, 1000, &mut Rng::new(1)).unwrap();
        assert!(e.mean.abs() < 1e-12);
    }

    fn traj(points: &[(f64, f64)]) -> Matrix {
        Matrix::new(points.len() * 2, 1, points.iter().flat_map(|p| [p.0, p.1]).collect()).unwrap()
    }

    #[test]
    fn forecast_examples() {
        let y = traj(&[(0.0, 0.0), (1.0, 0.0)]);
        let r = forecast_metrics(&[y.clone(), y.clone()], &y, &y, Some(&[0.25, 0.75])).unwrap();
        assert_eq!((r.ade, r.fde, r.ade1, r.fde1, r.adek, r.fdek), (0.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert!((r.brier_fdek - 0.75f64.powi(2)).abs() < 1e-15);

        let one = traj(&[(0.5, 0.0), (1.0, 1.0)]);
        let r = forecast_metrics(std::slice::from_ref(&one), &one, &y, None).unwrap();
        assert_eq!(r.ade, r.ade1);
        assert_eq!(r.ade, r.adek);

        let offset = traj(&[(0.0, 1.0), (1.0, 1.0)]);
        let r = forecast_metrics(&[y.clone(), offset.clone()], &offset, &y, None).unwrap();
        assert_eq!(r.adek, 0.0);
        assert_eq!(r.fde1, 1.0);
        assert_eq!(r.ade, 0.5);
    }

    #[test]
    fn forecast_rejects_bad_probs() {
        let y = traj(&[(0.0, 0.0)]);
        let e = forecast_metrics(&[y.clone(), y.clone()], &y, &y, Some(&[0.5, 0.6]));
        assert!(matches!(e, Err(Error::Contract(_))));
    }

    #[test]
    fn forecast_best_of_k_bounds_selected() {
        let mut rng = Rng::new(7);
        for _ in 0..100 {
            let mut rand = || Matrix::new(6, 3, (0..18).map(|_| rng.uniform_range(-3.0, 3.0)).collect()).unwrap();
            let y = rand();
            let modes = vec![rand(), rand(), rand()];
            let phi: Vec<Vec<f64>> = (0..3).map(|k| vec![k as f64 + 1.0, 3.0 - k as f64, 1.5]).collect();
            let (sel, _) = crate::nets::select(&modes, &phi).unwrap();
            let probs = mode_probs(&phi);
            let r = forecast_metrics(&modes, &sel, &y, Some(&probs)).unwrap();
            assert!(r.adek <= r.ade1 + 1e-12 && r.fdek <= r.fde1 + 1e-12 && r.fdek <= r.brier_fdek);
        }
    }

    #[test]
    fn stochasticity_examples() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(stochasticity(&[&a, &a]).unwrap(), 0.0);
        assert_eq!(stochasticity(&[&[0.0, 0.0], &[2.0, 2.0]]).unwrap(), 2.0);
        assert!(matches!(stochasticity(&[&a]), Err(Error::Contract(_))));

        let mut rng = Rng::new(2);
        let modes: Vec<Vec<f64>> = (0..4).map(|_| (0..10).map(|_| rng.standard_normal()).collect()).collect();
        let views: Vec<&[f64]> = modes.iter().map(Vec::as_slice).collect();
        let got = stochasticity(&views).unwrap();
        let mut want = 0.0;
        for e in 0..10 {
            let mean: f64 = modes.iter().map(|v| v[e]).sum::<f64>() / 4.0;
            let ss: f64 = modes.iter().map(|v| (v[e] - mean) * (v[e] - mean)).sum();
            want += ss / 3.0;
        }
        assert!((got - want / 10.0).abs() < 1e-12);
        let rev: Vec<&[f64]> = views.iter().rev().copied().collect();
        assert!((stochasticity(&rev).unwrap() - got).abs() < 1e-12);
    }

    #[test]
    fn spearman_conventions() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).sin()).collect();
        assert!((spearman(&x, &x).unwrap().rho - 1.0).abs() < 1e-12);
        let c = spearman(&x, &[2.0; 50]).unwrap();
        assert_eq!(c, Spearman { rho: 0.0, defined: false });

        let mut rng = Rng::new(99);
        let a: Vec<f64> = (0..1000).map(|_| rng.uniform()).collect();
        let b: Vec<f64> = (0..1000).map(|_| rng.uniform()).collect();
        assert!(spearman(&a, &b).unwrap().rho.abs() < 0.1);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn curve_has_equal_count_bins() {
        let s: Vec<f64> = (0..100).map(f64::from).collect();
        let c = stochasticity_curve(&s, &s, 10).unwrap();
        assert_eq!(c.bins.len(), 10);
        assert!(c.bins.iter().all(|b| b.2 == 10));
        assert!(c.bins.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn mode_probs_prefer_low_phi() {
        let p = mode_probs(&[vec![1.0, 1.0], vec![3.0, 3.0]]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15 && p[0] > p[1]);
    }
}
