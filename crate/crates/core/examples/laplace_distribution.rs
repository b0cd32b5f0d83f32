//! Multivariate Laplace sampling, density and the Bessel function behind it.

use cu_lab::linalg::Matrix;
use cu_lab::rng::Rng;
use cu_lab::stats::{bessel_k, sample_moments, MvLaplaceParams};

fn main() -> cu_lab::Result<()> {
    let gamma = Matrix::from_rows(&[&[1.0, 0.6], &[0.6, 2.0]]);
    let law = MvLaplaceParams::new(vec![3.0, -1.0], gamma, 1.5)?;
    let xs = law.sample(&mut Rng::new(11), 200_000);
    let (mean, cov) = sample_moments(&xs);
    println!("sample mean {mean:.3?}");
    println!("sample covariance {:.3?}", cov.data());
    println!("lambda * gamma    {:.3?}", law.covariance().data());
    println!("log p(mean + 0.5) = {:.6}", law.log_pdf(&[3.5, -0.5])?);
    for nu in [0.0, 0.5, 1.0] {
        println!("K_{nu}(1) = {:.12}", bessel_k(nu, 1.0)?);
    }
    Ok(())
}
