//! The Hadamard-bounded Laplace loss against the exact negative
//! log-likelihood, and covariance recovery from the network outputs.

use cu_lab::datagen::random_spd;
use cu_lab::objectives::{full_nll, lap_cu_loss, recover_covariance};
use cu_lab::rng::Rng;
use cu_lab::tensor::{Graph, Tensor};

fn main() -> cu_lab::Result<()> {
    let (m, s) = (4, 6);
    let mut rng = Rng::new(9);
    let p = random_spd(m, 0.5, 3.0, &mut rng);
    let resid: Vec<f64> = (0..m * s).map(|_| rng.standard_normal()).collect();
    let phi = vec![0.8, 1.2, 1.0, 0.5];

    let mut g = Graph::new();
    let r = g.constant(Tensor::matrix(m, s, resid)?);
    let f = g.constant(Tensor::matrix(m, 1, phi.clone())?);
    let pi = g.constant(Tensor::matrix(m, m, p.data().to_vec())?);
    let bound = lap_cu_loss(&mut g, r, f, pi, 1)?;
    let exact = full_nll(&mut g, r, f, pi, 1)?;
    println!("bounded loss {:.6} ≤ exact {:.6}", g.value(bound).item(), g.value(exact).item());

    let cov = recover_covariance(&phi, &p)?;
    println!("recovered covariance diag {:.4?}", cov.diag());
    Ok(())
}
