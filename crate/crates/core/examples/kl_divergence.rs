//! KL divergences: Gaussian closed form against Monte Carlo, and the
//! Monte-Carlo Laplace estimator.

use cu_lab::linalg::Matrix;
use cu_lab::metrics::{kl_gaussian, kl_laplace_mc};
use cu_lab::rng::Rng;
use cu_lab::stats::{MvLaplaceParams, MvnParams};

fn main() -> cu_lab::Result<()> {
    let s = Matrix::from_rows(&[&[1.0, 0.3], &[0.3, 0.5]]);
    let p = MvnParams::new(vec![0.0, 0.0], s.clone())?;
    let q = MvnParams::new(vec![0.5, -0.2], Matrix::identity(2))?;
    let mut rng = Rng::new(5);
    let n = 100_000;
    let mc: f64 = (0..n)
        .map(|_| {
            let x = p.sample_one(&mut rng);
            p.log_pdf(&x).unwrap() - q.log_pdf(&x).unwrap()
        })
        .sum::<f64>()
        / n as f64;
    println!("Gaussian KL: closed form {:.5}, Monte Carlo {mc:.5}", kl_gaussian(&p, &q)?);

    let lp = MvLaplaceParams::new(vec![0.0, 0.0], s, 1.0)?;
    let lq = MvLaplaceParams::new(vec![0.5, -0.2], Matrix::identity(2), 1.0)?;
    let same = kl_laplace_mc(&lp, &lp, 10_000, &mut rng)?;
    let diff = kl_laplace_mc(&lp, &lq, 10_000, &mut rng)?;
    println!("Laplace KL(p, p) = {:.4} ± {:.4}", same.mean, same.stderr);
    println!("Laplace KL(p, q) = {:.4} ± {:.4}", diff.mean, diff.stderr);
    Ok(())
}
