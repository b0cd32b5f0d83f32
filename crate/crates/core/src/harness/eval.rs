use serde::{Deserialize, Serialize};

use crate::datagen::{Instance, Task};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{
    forecast_metrics, instance_stochasticity, kl_laplace_slices, mode_probs, stochasticity_curve, toy_errors,
    ForecastReport, StochasticityCurve, ToyAccumulator, ToyReport,
};
use crate::nets::{select, Model, PredictiveOutput};
use crate::objectives::recover_covariance;
use crate::rng::Rng;
use crate::stats::MvLaplaceParams;

const CHUNK: usize = 64;

fn predictions<'a>(model: &'a Model, instances: &'a [Instance]) -> impl Iterator<Item = Result<(usize, PredictiveOutput)>> + 'a {
    instances.chunks(CHUNK).enumerate().flat_map(move |(c, chunk)| {
        let pasts: Vec<&Matrix> = chunk.iter().map(|i| &i.past).collect();
        match model.predict_batch(&pasts) {
            Ok(outs) => outs.into_iter().enumerate().map(|(j, o)| Ok((c * CHUNK + j, o))).collect::<Vec<_>>(),
            Err(e) => vec![Err(e)],
        }
    })
}

fn gt_law(inst: &Instance) -> Result<MvLaplaceParams> {
    let (sigma, lambda) = match (&inst.gt_sigma, inst.gt_lambda) {
        (Some(s), Some(l)) => (s.clone(), l),
        _ => return Err(Error::Validation(format!("instance {} has no generating law", inst.id))),
    };
    MvLaplaceParams::new(vec![0.0; sigma.rows()], sigma, lambda)
}

/// Estimated law with the generating shape parameter and the recovered
/// covariance.
fn estimated_law(out: &PredictiveOutput, lambda: f64) -> Result<(Matrix, MvLaplaceParams)> {
    let cov = recover_covariance(&out.phi[0], &out.sigma_inv[0])?;
    let m = cov.rows();
    let law = MvLaplaceParams::new(vec![0.0; m], cov.scale(1.0 / lambda), lambda)?;
    Ok((cov, law))
}

/// Mean slice-averaged KL of the first mode against the generating law.
/// Instance `i` draws from `rng.split(i)`.
pub fn toy_kl(model: &Model, instances: &[Instance], samples: usize, rng: &Rng) -> Result<f64> {
    let mut sum = 0.0;
    for item in predictions(model, instances) {
        let (i, out) = item?;
        let inst = &instances[i];
        let pg = gt_law(inst)?;
        let gt_mean = inst.gt_mean.as_ref().ok_or_else(|| Error::Validation("missing gt mean".into()))?;
        let (_, pe) = estimated_law(&out, pg.lambda())?;
        sum += kl_laplace_slices(&pg, gt_mean, &pe, &out.means[0], samples, &mut rng.split(i as u64))?.mean;
    }
    Ok(sum / instances.len().max(1) as f64)
}

pub type ToyEval = ToyReport;

/// Toy metrics of the first mode over a split.
pub fn eval_toy(model: &Model, instances: &[Instance], samples: usize, rng: &Rng) -> Result<ToyEval> {
    let mut acc = ToyAccumulator::default();
    for item in predictions(model, instances) {
        let (i, out) = item?;
        let inst = &instances[i];
        let pg = gt_law(inst)?;
        let gt_mean = inst.gt_mean.as_ref().ok_or_else(|| Error::Validation("missing gt mean".into()))?;
        let (cov, pe) = estimated_law(&out, pg.lambda())?;
        let errors = toy_errors(&out.means[0], &cov, gt_mean, &pg.covariance())?;
        let kl = kl_laplace_slices(&pg, gt_mean, &pe, &out.means[0], samples, &mut rng.split(i as u64))?;
        acc.push(errors, kl);
    }
    acc.finish()
}

/// Forecasting evaluation over a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastEval {
    pub metrics: ForecastReport,
    /// Mean `|Φ̂ − DE|` of the selected mode per agent.
    pub autl_gap: f64,
    /// Mean `Φ̂` of the selected mode.
    pub mean_phi: f64,
    /// Stochasticity against selected-mode `Φ̂`; absent for one mode.
    pub curve: Option<StochasticityCurve>,
    pub instances: usize,
}

pub fn eval_forecast(model: &Model, instances: &[Instance], bins: usize) -> Result<ForecastEval> {
    let mut reports = Vec::with_capacity(instances.len());
    let (mut gap, mut phi_sum, mut agents) = (0.0, 0.0, 0usize);
    let (mut stoch, mut unc) = (Vec::new(), Vec::new());
    for item in predictions(model, instances) {
        let (i, out) = item?;
        let y = instances[i].target(Task::Forecast);
        let (sel, chosen) = select(&out.means, &out.phi)?;
        let probs = mode_probs(&out.phi);
        reports.push(forecast_metrics(&out.means, &sel, y, Some(&probs))?);
        let mut inst_phi = 0.0;
        for (a, &k) in chosen.iter().enumerate() {
            let de = (0..y.rows()).map(|r| (y[(r, a)] - sel[(r, a)]).powi(2)).sum::<f64>().sqrt();
            let phi = out.phi[k][a];
            gap += (phi - de).abs();
            inst_phi += phi;
        }
        phi_sum += inst_phi;
        agents += chosen.len();
        if out.modes() >= 2 {
            stoch.push(instance_stochasticity(&out.means)?);
            unc.push(inst_phi / chosen.len() as f64);
        }
    }
    let curve = if stoch.len() >= 2 { Some(stochasticity_curve(&stoch, &unc, bins)?) } else { None };
    Ok(ForecastEval {
        metrics: ForecastReport::mean(&reports)?,
        autl_gap: gap / agents.max(1) as f64,
        mean_phi: phi_sum / agents.max(1) as f64,
        curve,
        instances: instances.len(),
    })
}

/// Evaluation detail of either task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalDetail {
    Toy(ToyEval),
    Forecast(ForecastEval),
}

impl EvalDetail {
    /// Flat named values for tabular reports.
    pub fn values(&self) -> Vec<(&'static str, f64)> {
        match self {
            EvalDetail::Toy(r) => vec![
                ("l2_mu", r.l2_mu),
                ("l1_sigma", r.l1_sigma),
                ("l1_sigma_inv", r.l1_sigma_inv),
                ("kl", r.kl),
                ("kl_stderr", r.kl_stderr),
                ("instances", r.instances as f64),
            ],
            EvalDetail::Forecast(r) => {
                let m = &r.metrics;
                let mut v = vec![
                    ("ade", m.ade),
                    ("fde", m.fde),
                    ("ade1", m.ade1),
                    ("fde1", m.fde1),
                    ("adek", m.adek),
                    ("fdek", m.fdek),
                    ("brier_fdek", m.brier_fdek),
                    ("k", m.k_used as f64),
                    ("autl_gap", r.autl_gap),
                    ("mean_phi", r.mean_phi),
                    ("instances", r.instances as f64),
                ];
                if let Some(c) = &r.curve {
                    v.push(("spearman", c.spearman.rho));
                }
                v
            }
        }
    }
}

/// Evaluates a model on instances of the given task.
pub fn eval_model(model: &Model, instances: &[Instance], task: Task, samples: usize, bins: usize, rng: &Rng) -> Result<EvalDetail> {
    if instances.is_empty() {
        return Err(Error::Validation("nothing to evaluate".into()));
    }
    Ok(match task {
        Task::Density => EvalDetail::Toy(eval_toy(model, instances, samples, rng)?),
        Task::Forecast => EvalDetail::Forecast(eval_forecast(model, instances, bins)?),
    })
}
