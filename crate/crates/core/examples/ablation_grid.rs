//! A four-cell IU against IU+CU grid on small scenes, with and without the
//! interaction module.

use cu_lab::harness::{ablate, preset, Grid};

fn main() -> cu_lab::Result<()> {
    let mut cfg = preset("scenes")?;
    cfg.data.scenes.counts.train = 200;
    cfg.data.scenes.counts.val = 40;
    cfg.data.scenes.counts.test = 60;
    cfg.model.hidden = 32;
    cfg.optim.steps = 300;
    cfg.eval.every = 100;
    cfg.ablate.couplings.clear();
    let out = std::env::temp_dir().join("cu-lab-example-ablation");
    let report = ablate(&cfg, Grid::CuInteraction, Some(&out))?;
    for c in &report.cells {
        let m = &c.report.metrics;
        println!("{:>8} {:>10} ade1 {:.3} fde1 {:.3}", c.report.estimator, c.report.interaction, m["ade1"], m["fde1"]);
    }
    for d in &report.deltas {
        println!("Δ {:>10} {:>11} {:+.2}%", d.interaction, d.metric, 100.0 * d.delta);
    }
    println!("reports in {}", out.display());
    Ok(())
}
