//! Basis functions `s(t)` on `[0, 1]`, per-curve basis matrices, the
//! lattice basis, and the transform that puts the lattice basis into the
//! identifiable parameterization `(S T)ᵀ Σ⁻¹ (S T) = I` with
//! `Σ = σ² I + S Γ Sᵀ`.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, SVD};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, min_eigenvalue, psd_factor, symmetrize};

pub const DEFAULT_Q: usize = 12;
pub const DEFAULT_ORDER: usize = 4;
pub const DEFAULT_LATTICE: usize = 365;

#[derive(Debug, Clone, PartialEq)]
pub enum BasisSpec {
    /// Clamped B-splines of the given order (degree `order - 1`).
    BSpline {
        order: usize,
        interior_knots: Vec<f64>,
    },
    /// Constant plus `(q - 1) / 2` sine/cosine pairs of period 1, scaled by
    /// `√2` so the columns are orthonormal in `L²[0, 1]`.
    Fourier { q: usize },
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec::bspline_uniform(DEFAULT_Q, DEFAULT_ORDER).expect("default basis is valid")
    }
}

impl BasisSpec {
    /// B-splines of dimension `q` with equispaced interior knots.
    pub fn bspline_uniform(q: usize, order: usize) -> Result<Self> {
        if order < 1 || q < order.max(2) {
            return Err(Error::InvalidBasis(format!(
                "bspline needs q >= max(order, 2); got q = {q}, order = {order}"
            )));
        }
        let m = q - order;
        let interior_knots = (1..=m).map(|j| j as f64 / (m + 1) as f64).collect();
        Self::bspline(order, interior_knots)
    }

    pub fn bspline(order: usize, interior_knots: Vec<f64>) -> Result<Self> {
        let spec = BasisSpec::BSpline {
            order,
            interior_knots,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn fourier(q: usize) -> Result<Self> {
        let spec = BasisSpec::Fourier { q };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dimension(&self) -> usize {
        match self {
            BasisSpec::BSpline {
                order,
                interior_knots,
            } => order + interior_knots.len(),
            BasisSpec::Fourier { q } => *q,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BasisSpec::BSpline {
                order,
                interior_knots,
            } => {
                if *order < 1 {
                    return Err(Error::InvalidBasis("order must be >= 1".into()));
                }
                if interior_knots.iter().any(|&k| !(k > 0.0 && k < 1.0)) {
                    return Err(Error::InvalidBasis(
                        "interior knots must lie in (0, 1)".into(),
                    ));
                }
                if interior_knots.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidBasis(
                        "interior knots must be strictly increasing".into(),
                    ));
                }
            }
            BasisSpec::Fourier { q } => {
                if q % 2 == 0 {
                    return Err(Error::InvalidBasis(format!(
                        "fourier q must be odd, got {q}"
                    )));
                }
            }
        }
        if self.dimension() < 2 {
            return Err(Error::InvalidBasis(format!(
                "dimension must be >= 2, got {}",
                self.dimension()
            )));
        }
        Ok(())
    }

    /// Full clamped knot vector for a B-spline basis.
    pub fn knot_vector(&self) -> Option<Vec<f64>> {
        match self {
            BasisSpec::BSpline {
                order,
                interior_knots,
            } => {
                let mut u = vec![0.0; *order];
                u.extend_from_slice(interior_knots);
                u.extend(std::iter::repeat_n(1.0, *order));
                Some(u)
            }
            BasisSpec::Fourier { .. } => None,
        }
    }

    /// Writes `s(t)` into `row`.
    fn eval_into(&self, t: f64, row: &mut [f64]) {
        match self {
            BasisSpec::BSpline { order, .. } => {
                let knots = self.knot_vector().expect("bspline");
                bspline_row(&knots, *order, self.dimension(), t, row);
            }
            BasisSpec::Fourier { q } => {
                row[0] = 1.0;
                for m in 1..=(q - 1) / 2 {
                    let w = 2.0 * PI * m as f64 * t;
                    row[2 * m - 1] = SQRT_2 * w.sin();
                    row[2 * m] = SQRT_2 * w.cos();
                }
            }
        }
    }
}

/// Nonzero B-spline values at `t` via the triangular Cox–de Boor scheme.
fn bspline_row(knots: &[f64], order: usize, q: usize, t: f64, row: &mut [f64]) {
    row.iter_mut().for_each(|v| *v = 0.0);
    let p = order - 1;
    // the last nonempty interval is closed on the right
    let span = if t >= knots[q] {
        q - 1
    } else {
        let mut lo = p;
        let mut hi = q;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    };
    let mut n = vec![0.0; order];
    let mut left = vec![0.0; order];
    let mut right = vec![0.0; order];
    n[0] = 1.0;
    for j in 1..=p {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let tmp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        n[j] = saved;
    }
    for (r, v) in n.into_iter().enumerate() {
        row[span - p + r] = v;
    }
}

/// `S_i`: one row `s(t_j)ᵀ` per time point.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    pub values: DMatrix<f64>,
    pub times: Vec<f64>,
}

pub fn evaluate_basis(spec: &BasisSpec, times: &[f64]) -> Result<BasisMatrix> {
    spec.validate()?;
    if let Some(&t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Domain(t));
    }
    let q = spec.dimension();
    let mut values = DMatrix::zeros(times.len(), q);
    let mut row = vec![0.0; q];
    for (j, &t) in times.iter().enumerate() {
        spec.eval_into(t, &mut row);
        for (c, &v) in row.iter().enumerate() {
            values[(j, c)] = v;
        }
    }
    Ok(BasisMatrix {
        values,
        times: times.to_vec(),
    })
}

/// The basis evaluated on the equispaced lattice `(l - 0.5) / L`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeBasis {
    pub values: DMatrix<f64>,
    pub lattice: Vec<f64>,
}

pub fn build_lattice_basis(spec: &BasisSpec, size: usize) -> Result<LatticeBasis> {
    let q = spec.dimension();
    if size < q {
        return Err(Error::InvalidBasis(format!(
            "lattice size {size} is smaller than basis dimension {q}"
        )));
    }
    let lattice: Vec<f64> = (1..=size).map(|l| (l as f64 - 0.5) / size as f64).collect();
    let values = evaluate_basis(spec, &lattice)?.values;
    let rank = numerical_rank(&values);
    if rank < q {
        return Err(Error::DegenerateBasis { rank, q });
    }
    Ok(LatticeBasis { values, lattice })
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = SVD::new(m.clone(), false, false).singular_values;
    let max = sv.iter().fold(0.0f64, |a, &b| a.max(b));
    let tol = max * m.nrows().max(m.ncols()) as f64 * f64::EPSILON;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Invertible `T` (with its inverse) mapping coefficients of the raw basis
/// to the working basis `S T`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoTransform {
    pub t: DMatrix<f64>,
    pub t_inv: DMatrix<f64>,
}

impl OrthoTransform {
    pub fn identity(q: usize) -> Self {
        Self {
            t: DMatrix::identity(q, q),
            t_inv: DMatrix::identity(q, q),
        }
    }

    pub fn dimension(&self) -> usize {
        self.t.nrows()
    }

    /// `S T`.
    pub fn apply_basis(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        s * &self.t
    }

    /// `T⁻¹ a`: coefficients in the transformed basis representing the same
    /// function as `a` in the original one.
    pub fn map_coefficients(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        &self.t_inv * a
    }

    /// `T⁻¹ Γ T⁻ᵀ`.
    pub fn map_covariance(&self, gamma: &DMatrix<f64>) -> DMatrix<f64> {
        symmetrize(&(&self.t_inv * gamma * self.t_inv.transpose()))
    }

    /// Transform equivalent to applying `self` then `next`.
    pub fn then(&self, next: &OrthoTransform) -> OrthoTransform {
        OrthoTransform {
            t: &self.t * &next.t,
            t_inv: &next.t_inv * &self.t_inv,
        }
    }
}

/// `Sᵀ Σ⁻¹ S` for `Σ = σ² I + S Γ Sᵀ`, evaluated on q × q matrices only.
///
/// With `SᵀS = L Lᵀ`, `Σ S = S (σ² I + Γ SᵀS)`, which gives
/// `Sᵀ Σ⁻¹ S = L (σ² I + Lᵀ Γ L)⁻¹ Lᵀ`.
pub fn precision_gram(s: &DMatrix<f64>, gamma: &DMatrix<f64>, sigma2: f64) -> Result<DMatrix<f64>> {
    let q = s.ncols();
    let gram = s.transpose() * s;
    let l = cholesky(&gram, "basis gram matrix")?.l();
    let inner = DMatrix::identity(q, q) * sigma2 + l.transpose() * gamma * &l;
    let inner_chol = cholesky(&inner, "σ²I + LᵀΓL")?;
    let solved = inner_chol.solve(&l.transpose());
    Ok(symmetrize(&(&l * solved)))
}

/// Returns `T` with `(S T)ᵀ Σ⁻¹ (S T) = I`: factor `M = Sᵀ Σ⁻¹ S = Rᵀ R`
/// and take `T = R⁻¹`.
pub fn orthogonalize(
    lattice: &LatticeBasis,
    gamma: &DMatrix<f64>,
    sigma2: f64,
) -> Result<OrthoTransform> {
    if !(sigma2 > 0.0) {
        return Err(Error::Config(format!("σ² must be positive, got {sigma2}")));
    }
    // rejects non-PSD Γ
    psd_factor(gamma)?;
    let m = precision_gram(&lattice.values, gamma, sigma2)?;
    let min_eig = min_eigenvalue(&m);
    let max_eig = m.diagonal().iter().fold(0.0f64, |a, &v| a.max(v));
    if !(min_eig > max_eig * 1e-13) {
        return Err(Error::Conditioning {
            context: "SᵀΣ⁻¹S".into(),
            min_eigenvalue: min_eig,
        });
    }
    let l = cholesky(&m, "SᵀΣ⁻¹S")?.l();
    // M = L Lᵀ = Rᵀ R with R = Lᵀ
    let r = l.transpose();
    let q = m.nrows();
    let t = r
        .solve_upper_triangular(&DMatrix::identity(q, q))
        .ok_or_else(|| Error::Conditioning {
            context: "triangular factor of SᵀΣ⁻¹S".into(),
            min_eigenvalue: min_eig,
        })?;
    Ok(OrthoTransform { t, t_inv: r })
}

/// `max |(S T)ᵀ Σ⁻¹ (S T) − I|`.
pub fn constraint_residual(
    lattice: &LatticeBasis,
    gamma: &DMatrix<f64>,
    sigma2: f64,
    transform: &OrthoTransform,
) -> Result<f64> {
    let m = precision_gram(&lattice.values, gamma, sigma2)?;
    let c = transform.t.transpose() * m * &transform.t;
    let q = c.nrows();
    Ok((c - DMatrix::<f64>::identity(q, q))
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs())))
}
