//! Evaluate a cubic B-spline basis and compute the transform that makes the
//! coefficients identifiable for a given random-effect covariance.

use nalgebra::DMatrix;
use spatial_fclust::basis::{
    build_lattice_basis, constraint_residual, evaluate_basis, orthogonalize, BasisSpec,
};

fn main() -> spatial_fclust::Result<()> {
    let spec = BasisSpec::bspline_uniform(12, 4)?;
    println!("knots: {:?}", spec.knot_vector().unwrap());

    let s = evaluate_basis(&spec, &[0.0, 0.25, 0.5, 1.0])?;
    for (t, row) in s.times.iter().zip(s.values.row_iter()) {
        let nonzero: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("t = {t:.2}: [{}]", nonzero.join(" "));
    }

    let lattice = build_lattice_basis(&spec, 365)?;
    let q = spec.dimension();
    let gamma = DMatrix::from_fn(q, q, |i, j| 0.5f64.powi((i as i32 - j as i32).abs()));
    let sigma2 = 0.8;
    let t = orthogonalize(&lattice, &gamma, sigma2)?;
    let residual = constraint_residual(&lattice, &gamma, sigma2, &t)?;
    println!("T diagonal: {:.3?}", t.t.diagonal().as_slice());
    println!("max |(ST)ᵀΣ⁻¹(ST) − I| = {residual:.2e}");

    let fourier = BasisSpec::fourier(7)?;
    let f = evaluate_basis(&fourier, &[0.125])?;
    println!(
        "Fourier row at t = 0.125: {:.3?}",
        f.values.row(0).iter().collect::<Vec<_>>()
    );
    Ok(())
}
