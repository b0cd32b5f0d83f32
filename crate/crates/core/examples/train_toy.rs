//! Trains the covariance estimator on a small toy dataset and reports the
//! test metrics.

use cu_lab::harness::{evaluate, load_data, preset, train, trace_health};

fn main() -> cu_lab::Result<()> {
    let mut cfg = preset("toy-smoke")?;
    cfg.optim.steps = 400;
    cfg.eval.every = 100;
    let data = load_data(&cfg)?;
    let out = train(&cfg, &data, None)?;
    let first = out.trace.first().unwrap().total;
    let last = out.trace.last().unwrap().total;
    println!("loss {first:.3} -> {last:.3}, selected step {}", out.best_step);
    println!("validation KL {:?}", out.validation);
    println!("trace health {:?}", trace_health(&out.trace, 100, 200));
    let report = evaluate(&cfg, &out.model, &data, &data.content_hash()?)?;
    for (k, v) in &report.metrics {
        println!("{k:>14} {v:.5}");
    }
    Ok(())
}
