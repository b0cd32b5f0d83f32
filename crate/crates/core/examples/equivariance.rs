//! Permuting agents permutes the covariance estimated by the
//! permutation-equivariant estimator, but not the one of the
//! non-equivariant baseline.

use cu_lab::datagen::permute_columns;
use cu_lab::nets::{Dims, EstimatorKind, Interaction, Model, ModelConfig};
use cu_lab::rng::Rng;
use cu_lab::linalg::Matrix;

fn violation(kind: EstimatorKind, rng: &mut Rng) -> cu_lab::Result<f64> {
    let m = 5;
    let dims = Dims { m, t_in: 8, t_out: 8 };
    let cfg = ModelConfig { estimator: kind, interaction: Interaction::Attention, hidden: 32, init_seed: 1, ..Default::default() };
    let model = Model::new(cfg, dims)?;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = Matrix::new(8, m, (0..8 * m).map(|_| rng.uniform_range(-5.0, 5.0)).collect())?;
        let perm = rng.permutation(m);
        let a = model.predict(&x)?.sigma_inv.remove(0);
        let b = model.predict(&permute_columns(&x, &perm))?.sigma_inv.remove(0);
        worst = worst.max(b.max_abs_diff(&a.conjugate_by_permutation(&perm)));
    }
    Ok(worst)
}

fn main() -> cu_lab::Result<()> {
    let mut rng = Rng::new(2);
    for kind in [EstimatorKind::PeCu, EstimatorKind::CuNpe] {
        println!("{:>7}: max |Σ(PX) − PΣ(X)Pᵀ| = {:.3e}", kind.label(), violation(kind, &mut rng)?);
    }
    Ok(())
}
