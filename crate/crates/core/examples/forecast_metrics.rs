//! ADE/FDE variants, mode selection by predicted uncertainty and the
//! stochasticity score on a hand-made two-mode prediction.

use cu_lab::linalg::Matrix;
use cu_lab::metrics::{forecast_metrics, mode_probs, spearman, stochasticity};
use cu_lab::nets::select;

fn main() -> cu_lab::Result<()> {
    // two agents, two future steps, rows are x0 y0 x1 y1
    let truth = Matrix::from_rows(&[&[0.0, 5.0], &[0.0, 0.0], &[1.0, 5.0], &[0.0, 1.0]]);
    let straight = truth.clone();
    let shifted = truth.add(&Matrix::from_rows(&[&[0.0, 0.0], &[1.0, 1.0], &[0.0, 0.0], &[1.0, 1.0]]))?;
    let modes = [shifted, straight];
    let phi = vec![vec![0.5, 2.0], vec![1.5, 0.4]];

    let (selected, chosen) = select(&modes, &phi)?;
    println!("selected modes per agent {chosen:?}");
    let r = forecast_metrics(&modes, &selected, &truth, Some(&mode_probs(&phi)))?;
    println!("{r:#?}");

    let flat: Vec<&[f64]> = modes.iter().map(Matrix::data).collect();
    println!("stochasticity {:.4}", stochasticity(&flat)?);
    println!("spearman {:?}", spearman(&[1.0, 2.0, 3.0, 4.0], &[0.1, 0.4, 0.3, 0.9])?);
    Ok(())
}
