use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{eval, write_file, OptimizerKind, RunConfig};
use crate::datagen::{Instance, SplitDataset, Task};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nets::{stack_agent_rows, Dims, Model};
use crate::objectives::{total_loss, LossBreakdown, LossConfig};
use crate::rng::Rng;
use crate::tensor::{Adam, GradClip, Graph, Optimizer, ParamStore, Sgd};

/// Random streams derived from the run seed.
pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_BATCHES: u64 = 2;
pub(crate) const STREAM_VAL: u64 = 3;
pub(crate) const STREAM_TEST: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    pub lap_cu: f64,
    pub autl: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the selected checkpoint.
    pub model: Model,
    pub trace: Vec<TraceRow>,
    /// `(step, score)` of every validation pass; lower is better.
    pub validation: Vec<(usize, f64)>,
    pub best_step: usize,
}

/// Builds the model a configuration describes for a dataset.
pub fn build_model(cfg: &RunConfig, data: &SplitDataset) -> Result<Model> {
    let first = data
        .train
        .instances
        .first()
        .ok_or_else(|| Error::Validation("training split is empty".into()))?;
    let task = data.train.task();
    let dims = Dims { m: first.agents(), t_in: first.past.rows(), t_out: first.target(task).rows() };
    let mut model_cfg = cfg.model.clone();
    model_cfg.init_seed = Rng::new(cfg.run.seed).split(STREAM_INIT).next_u64() ^ cfg.model.init_seed;
    Model::new(model_cfg, dims)
}

/// Loss of one batch on an existing graph.
pub(crate) fn batch_loss(
    model: &Model,
    loss: &LossConfig,
    g: &mut Graph,
    p: &crate::tensor::Bound,
    batch: &[&Instance],
    task: Task,
) -> Result<(crate::objectives::LossVars, LossBreakdown)> {
    let pasts: Vec<&Matrix> = batch.iter().map(|i| &i.past).collect();
    let targets: Vec<&Matrix> = batch.iter().map(|i| i.target(task)).collect();
    let out = model.forward(g, p, &pasts)?;
    let t = g.constant(stack_agent_rows(&targets)?);
    total_loss(loss, g, &out, t)
}

/// Mean total loss over instances with frozen parameters.
pub(crate) fn mean_loss(model: &Model, loss: &LossConfig, instances: &[Instance], task: Task, batch: usize) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in instances.chunks(batch) {
        let mut g = Graph::new();
        let p = model.params().attach_frozen(&mut g);
        let refs: Vec<&Instance> = chunk.iter().collect();
        let (_, b) = batch_loss(model, loss, &mut g, &p, &refs, task)?;
        sum += b.total * chunk.len() as f64;
    }
    Ok(sum / instances.len().max(1) as f64)
}

fn validation_score(cfg: &RunConfig, model: &Model, data: &SplitDataset) -> Result<f64> {
    let n = cfg.eval.val_instances.min(data.val.len());
    let val = &data.val.instances[..n];
    if n == 0 {
        return Err(Error::Validation("validation split is empty".into()));
    }
    match data.val.task() {
        Task::Density => {
            let rng = Rng::new(cfg.run.seed).split(STREAM_VAL);
            eval::toy_kl(model, val, cfg.eval.val_kl_samples, &rng)
        }
        Task::Forecast => mean_loss(model, &cfg.loss, val, Task::Forecast, cfg.optim.batch),
    }
}

fn all_finite(params: &ParamStore) -> bool {
    params.iter().all(|(_, t)| t.is_finite() && t.grad().is_none_or(|g| g.iter().all(|v| v.is_finite())))
}

/// Mini-batch training on the total loss.
///
/// Batches are drawn without replacement from a fresh permutation every
/// epoch. With `eval.every > 0` the parameters with the lowest validation
/// score (KL for density data, total loss for forecasting) are returned.
/// A non-finite loss or gradient, or any other numeric failure, aborts the
/// run; when `abort_dir` is given the last finite parameters are written
/// there first.
pub fn train(cfg: &RunConfig, data: &SplitDataset, abort_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let task = data.train.task();
    let mut model = build_model(cfg, data)?;
    let clip = (cfg.optim.clip > 0.0).then_some(GradClip(cfg.optim.clip));
    let mut opt: Box<dyn Optimizer> = match cfg.optim.optimizer {
        OptimizerKind::Sgd => Box::new(Sgd::new(cfg.optim.lr, clip)?),
        OptimizerKind::Adam => Box::new(Adam::new(cfg.optim.lr, clip)?),
    };
    let n = data.train.len();
    let bs = cfg.optim.batch.min(n);
    if bs == 0 {
        return Err(Error::Validation("training split is empty".into()));
    }
    let mut rng = Rng::new(cfg.run.seed).split(STREAM_BATCHES);
    let mut order = rng.permutation(n);
    let mut cursor = 0;

    let mut trace = Vec::with_capacity(cfg.optim.steps);
    let mut validation = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut consider = |step: usize, model: &Model, best: &mut Option<(usize, f64, ParamStore)>| -> Result<()> {
        if cfg.eval.every == 0 {
            return Ok(());
        }
        let score = validation_score(cfg, model, data)?;
        validation.push((step, score));
        if score.is_finite() && best.as_ref().is_none_or(|b| score < b.1) {
            *best = Some((step, score, model.params().clone()));
        }
        Ok(())
    };
    consider(0, &model, &mut best)?;

    for step in 0..cfg.optim.steps {
        if cursor + bs > n {
            order = rng.permutation(n);
            cursor = 0;
        }
        let batch: Vec<&Instance> = order[cursor..cursor + bs].iter().map(|&i| &data.train.instances[i]).collect();
        cursor += bs;

        let mut g = Graph::new();
        let p = model.params().attach(&mut g);
        let attempt = batch_loss(&model, &cfg.loss, &mut g, &p, &batch, task).and_then(|(vars, b)| {
            if !b.total.is_finite() {
                return Ok(Err(b));
            }
            g.backward(vars.total)?;
            model.params_mut().collect_grads(&g, &p)?;
            Ok(if all_finite(model.params()) { Ok(b) } else { Err(b) })
        });
        let b = match attempt {
            Ok(Ok(b)) => b,
            Ok(Err(b)) => {
                let msg = format!(
                    "non-finite loss or gradient at step {step} (total {}, lap-cu {}, autl {})",
                    b.total, b.lap_cu, b.autl
                );
                return Err(abort(&mut model, &trace, step, msg, abort_dir));
            }
            Err(e) if e.is_numeric() => {
                return Err(abort(&mut model, &trace, step, format!("step {step}: {e}"), abort_dir));
            }
            Err(e) => return Err(e),
        };
        let grad_norm = model.params().grad_norm()?;
        opt.step(model.params_mut())?;
        model.params_mut().zero_grads();
        trace.push(TraceRow { step, total: b.total, lap_cu: b.lap_cu, autl: b.autl, grad_norm });

        let done = step + 1;
        if cfg.eval.every > 0 && (done % cfg.eval.every == 0 || done == cfg.optim.steps) {
            match consider(done, &model, &mut best) {
                Err(e) if e.is_numeric() => {
                    return Err(abort(&mut model, &trace, done, format!("validation at step {done}: {e}"), abort_dir));
                }
                other => other?,
            }
        }
    }

    let best_step = match best {
        Some((step, _, params)) => {
            *model.params_mut() = params;
            step
        }
        None => cfg.optim.steps,
    };
    Ok(TrainOutcome { model, trace, validation, best_step })
}

/// Writes the last finite parameters and a diagnostic tail, then returns the
/// numeric error. A failure to write is reported instead.
fn abort(model: &mut Model, trace: &[TraceRow], step: usize, msg: String, dir: Option<&Path>) -> Error {
    if let Some(dir) = dir {
        model.params_mut().zero_grads();
        let diag = serde_json::json!({ "step": step, "message": msg, "trace_tail": trace.iter().rev().take(20).collect::<Vec<&TraceRow>>() });
        let written = model
            .save(dir.join("last_good.ckpt"))
            .and_then(|()| write_file(&dir.join("abort.json"), serde_json::to_string_pretty(&diag).expect("json").as_bytes()));
        if let Err(e) = written {
            return e;
        }
    }
    Error::Numeric(msg)
}

/// Smoothness check of a loss trace: after `start`, the moving average over
/// `window` steps should not rise more than 5% above its running minimum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHealth {
    pub ok: bool,
    /// Largest rise of the moving average relative to its running minimum.
    pub worst_rise: f64,
}

pub fn trace_health(trace: &[TraceRow], window: usize, start: usize) -> TraceHealth {
    let mut worst: f64 = 0.0;
    let mut min = f64::INFINITY;
    let mut sum = 0.0;
    for (i, row) in trace.iter().enumerate() {
        sum += row.total;
        if i >= window {
            sum -= trace[i - window].total;
        }
        if i + 1 < window || i < start {
            continue;
        }
        let ma = sum / window as f64;
        if min.is_finite() {
            worst = worst.max((ma - min) / min.abs().max(1e-12));
        }
        min = min.min(ma);
    }
    TraceHealth { ok: worst <= 0.05, worst_rise: worst }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::preset;

    fn tiny() -> RunConfig {
        let mut cfg = preset("toy-smoke").unwrap();
        cfg.optim.steps = 30;
        cfg.eval.every = 10;
        cfg
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut cfg = tiny();
        cfg.optim.lr = 0.0;
        cfg.eval.every = 0;
        let data = super::super::load_data(&cfg).unwrap();
        let init = build_model(&cfg, &data).unwrap();
        let out = train(&cfg, &data, None).unwrap();
        assert_eq!(out.model.params(), init.params());
        assert_eq!(out.trace.len(), 30);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny();
        let data = super::super::load_data(&cfg).unwrap();
        let a = train(&cfg, &data, None).unwrap();
        let b = train(&cfg, &data, None).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.validation.len(), 4);
    }

    #[test]
    fn health_flags_rising_trace() {
        let row = |step, total| TraceRow { step, total, lap_cu: total, autl: 0.0, grad_norm: 0.0 };
        let falling: Vec<TraceRow> = (0..1000).map(|i| row(i, 100.0 - i as f64 * 0.01)).collect();
        assert!(trace_health(&falling, 100, 500).ok);
        let rising: Vec<TraceRow> = (0..1000).map(|i| row(i, 1.0 + i as f64 * 0.01)).collect();
        assert!(!trace_health(&rising, 100, 500).ok);
    }
}
