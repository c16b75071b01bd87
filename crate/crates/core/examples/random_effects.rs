//! Marginal likelihood of one curve under the mixed model and the posterior
//! of its random effect.

use nalgebra::{DMatrix, DVector};
use spatial_fclust::basis::{evaluate_basis, BasisSpec};
use spatial_fclust::model::{marginal_loglik, random_effect_posterior, CovParams};

fn main() -> spatial_fclust::Result<()> {
    let spec = BasisSpec::bspline_uniform(6, 4)?;
    let times: Vec<f64> = (0..40).map(|i| (i as f64 + 0.5) / 40.0).collect();
    let s = evaluate_basis(&spec, &times)?.values;

    let alpha = DVector::from_vec(vec![2.0, 3.0, 5.0, 4.0, 2.5, 2.0]);
    let shift = DVector::from_vec(vec![0.4, 0.4, 0.4, 0.4, 0.4, 0.4]);
    let y: Vec<f64> = (&s * (&alpha + &shift))
        .iter()
        .enumerate()
        .map(|(i, v)| v + 0.1 * ((i * 7 % 5) as f64 - 2.0))
        .collect();

    for scale in [0.0, 0.1, 1.0] {
        let cov = CovParams {
            gamma: DMatrix::identity(6, 6) * scale,
            sigma2: 0.05,
        };
        let ll = marginal_loglik(&y, &s, &alpha, &cov)?;
        let post = random_effect_posterior(&y, &s, &alpha, &cov)?;
        println!(
            "Γ = {scale} I: log f = {ll:9.3}, E[γ | y] = {:.3?}",
            post.mean.as_slice()
        );
    }
    Ok(())
}
