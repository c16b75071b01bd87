//! Functional linear mixed model for a curve in cluster `k`:
//!
//! `Y_i = S_i (α_k + γ_i) + ε_i`, `γ_i ~ N(0, Γ)`, `ε_i ~ N(0, σ² I)`,
//!
//! so marginally `Y_i | Z_i = k ~ N(S_i α_k, σ² I + S_i Γ S_iᵀ)`. Every
//! quantity below is evaluated on q × q systems through the Woodbury
//! identity and the matrix-determinant lemma. With `Γ = L Lᵀ` and
//! `K = σ² I + Lᵀ S_iᵀ S_i L`:
//!
//! * `log |Σ_i| = (n_i − q) log σ² + log |K|`
//! * `rᵀ Σ_i⁻¹ r = (rᵀ r − (Lᵀ S_iᵀ r)ᵀ K⁻¹ (Lᵀ S_iᵀ r)) / σ²`
//!
//! which stays valid for singular `Γ`.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::basis::{build_lattice_basis, evaluate_basis, BasisSpec, LatticeBasis, OrthoTransform};
use crate::curves::{write_comment, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, dvec, log_det_cholesky, project_psd, psd_factor, symmetrize};
use crate::mrf::{LabelField, MrfParams};

pub const SIGMA2_MIN: f64 = 1e-8;

/// Cluster mean coefficients, one row per cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterParams {
    pub alpha: DMatrix<f64>,
}

impl ClusterParams {
    pub fn n_clusters(&self) -> usize {
        self.alpha.nrows()
    }

    pub fn mean(&self, k: usize) -> DVector<f64> {
        self.alpha.row(k).transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovParams {
    pub gamma: DMatrix<f64>,
    pub sigma2: f64,
}

impl CovParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 >= SIGMA2_MIN) || !self.sigma2.is_finite() {
            return Err(Error::Validation(format!(
                "σ² = {} is below the floor {SIGMA2_MIN}",
                self.sigma2
            )));
        }
        if self.gamma.nrows() != self.gamma.ncols() {
            return Err(Error::Validation("Γ must be square".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Coefficients in the working basis `S T`.
    pub clusters: ClusterParams,
    /// Random-effect covariance in the working basis.
    pub cov: CovParams,
    pub mrf: MrfParams,
    pub basis: BasisSpec,
    /// Maps raw-basis coefficients to working-basis coefficients.
    pub transform: OrthoTransform,
}

impl ModelParams {
    /// Cluster means expressed in the raw basis `S`, one row per cluster.
    pub fn raw_alpha(&self) -> DMatrix<f64> {
        (&self.transform.t * self.clusters.alpha.transpose()).transpose()
    }

    /// `T Γ Tᵀ`: the random-effect covariance in the raw basis.
    pub fn raw_gamma(&self) -> DMatrix<f64> {
        symmetrize(&(&self.transform.t * &self.cov.gamma * self.transform.t.transpose()))
    }

    /// Same model in the working basis `S T'` for the new total transform
    /// `T'`.
    pub fn retransformed(&self, new_total: &OrthoTransform) -> ModelParams {
        // coefficients change by T'⁻¹ T
        let step = OrthoTransform {
            t: &self.transform.t_inv * &new_total.t,
            t_inv: &new_total.t_inv * &self.transform.t,
        };
        ModelParams {
            clusters: ClusterParams {
                alpha: step
                    .map_coefficients(&self.clusters.alpha.transpose())
                    .transpose(),
            },
            cov: CovParams {
                gamma: step.map_covariance(&self.cov.gamma),
                sigma2: self.cov.sigma2,
            },
            mrf: self.mrf,
            basis: self.basis.clone(),
            transform: new_total.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffectPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Sufficient statistics of one curve under a basis: `SᵀS`, `Sᵀy`, `yᵀy`,
/// `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveStats {
    pub n: usize,
    pub gram: DMatrix<f64>,
    pub sty: DVector<f64>,
    pub yty: f64,
}

impl CurveStats {
    pub fn new(y: &[f64], s: &DMatrix<f64>) -> Self {
        let yv = dvec(y);
        Self {
            n: y.len(),
            gram: symmetrize(&(s.transpose() * s)),
            sty: s.transpose() * &yv,
            yty: yv.dot(&yv),
        }
    }

    /// Statistics of the same curve under the basis `S T`.
    pub fn transformed(&self, t: &OrthoTransform) -> Self {
        Self {
            n: self.n,
            gram: symmetrize(&(t.t.transpose() * &self.gram * &t.t)),
            sty: t.t.transpose() * &self.sty,
            yty: self.yty,
        }
    }

    /// Least-squares coefficients `(SᵀS)⁻¹ Sᵀy`.
    pub fn ols(&self) -> Result<DVector<f64>> {
        Ok(cholesky(&self.gram, "curve gram matrix")?.solve(&self.sty))
    }

    fn rss(&self, a: &DVector<f64>) -> f64 {
        (self.yty - 2.0 * a.dot(&self.sty) + a.dot(&(&self.gram * a))).max(0.0)
    }
}

/// `Γ = L Lᵀ` plus `σ²`, factored once per parameter update.
#[derive(Debug, Clone)]
pub struct CovFactor {
    l: DMatrix<f64>,
    sigma2: f64,
}

impl CovFactor {
    pub fn new(cov: &CovParams) -> Result<Self> {
        cov.validate()?;
        Ok(Self {
            l: psd_factor(&cov.gamma)?,
            sigma2: cov.sigma2,
        })
    }

    /// The q × q system shared by every quantity for one curve.
    pub fn kernel(&self, gram: &DMatrix<f64>) -> Result<CurveKernel> {
        let q = gram.nrows();
        let ltg = self.l.transpose() * gram;
        let k = DMatrix::identity(q, q) * self.sigma2 + &ltg * &self.l;
        let chol = cholesky(&k, "σ²I + LᵀSᵀSL")?;
        Ok(CurveKernel {
            log_det_k: log_det_cholesky(&chol),
            chol,
            ltg,
            l: self.l.clone(),
            sigma2: self.sigma2,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CurveKernel {
    chol: Cholesky<f64, Dyn>,
    log_det_k: f64,
    /// `Lᵀ SᵀS`
    ltg: DMatrix<f64>,
    l: DMatrix<f64>,
    sigma2: f64,
}

impl CurveKernel {
    fn log_det_sigma(&self, n: usize) -> f64 {
        let q = self.l.nrows() as f64;
        (n as f64 - q) * self.sigma2.ln() + self.log_det_k
    }

    /// Gaussian log density from `rᵀr` and `Sᵀr`.
    fn loglik_from_residual(&self, n: usize, rtr: f64, str_: &DVector<f64>) -> f64 {
        let btr = self.l.transpose() * str_;
        let quad = (rtr - btr.dot(&self.chol.solve(&btr))) / self.sigma2;
        -0.5 * (n as f64 * (2.0 * PI).ln() + self.log_det_sigma(n) + quad)
    }

    pub fn loglik(&self, stats: &CurveStats, alpha: &DVector<f64>) -> f64 {
        let str_ = &stats.sty - &stats.gram * alpha;
        self.loglik_from_residual(stats.n, stats.rss(alpha), &str_)
    }

    pub fn posterior(&self, stats: &CurveStats, alpha: &DVector<f64>) -> RandomEffectPosterior {
        let str_ = &stats.sty - &stats.gram * alpha;
        self.posterior_from_residual(&str_)
    }

    /// `E[γ | y] = L K⁻¹ Lᵀ Sᵀ r`, `Cov[γ | y] = σ² L K⁻¹ Lᵀ`.
    fn posterior_from_residual(&self, str_: &DVector<f64>) -> RandomEffectPosterior {
        let btr = self.l.transpose() * str_;
        let mean = &self.l * self.chol.solve(&btr);
        let cov = symmetrize(&(&self.l * self.chol.solve(&self.l.transpose()) * self.sigma2));
        RandomEffectPosterior { mean, cov }
    }

    /// `(Sᵀ Σ⁻¹ S, Sᵀ Σ⁻¹ y)`.
    pub fn gls_terms(&self, stats: &CurveStats) -> (DMatrix<f64>, DVector<f64>) {
        let a = (&stats.gram - self.ltg.transpose() * self.chol.solve(&self.ltg)) / self.sigma2;
        let lth = self.l.transpose() * &stats.sty;
        let b = (&stats.sty - self.ltg.transpose() * self.chol.solve(&lth)) / self.sigma2;
        (symmetrize(&a), b)
    }
}

/// Exact log density of `y ~ N(S α, σ² I + S Γ Sᵀ)`.
pub fn marginal_loglik(
    y: &[f64],
    s: &DMatrix<f64>,
    alpha: &DVector<f64>,
    cov: &CovParams,
) -> Result<f64> {
    let kernel = CovFactor::new(cov)?.kernel(&(s.transpose() * s))?;
    let r = dvec(y) - s * alpha;
    Ok(kernel.loglik_from_residual(y.len(), r.dot(&r), &(s.transpose() * &r)))
}

/// Conditional law of `γ_i` given `Y_i` and `Z_i = k`.
pub fn random_effect_posterior(
    y: &[f64],
    s: &DMatrix<f64>,
    alpha: &DVector<f64>,
    cov: &CovParams,
) -> Result<RandomEffectPosterior> {
    let kernel = CovFactor::new(cov)?.kernel(&(s.transpose() * s))?;
    let r = dvec(y) - s * alpha;
    Ok(kernel.posterior_from_residual(&(s.transpose() * r)))
}

/// Per-curve sufficient statistics under the raw basis, plus the lattice
/// basis used for the identifiability transform.
#[derive(Debug, Clone)]
pub struct FunctionalDesign {
    pub spec: BasisSpec,
    pub lattice: LatticeBasis,
    pub stats: Vec<CurveStats>,
    pub site_ids: Vec<String>,
}

impl FunctionalDesign {
    pub fn new(dataset: &Dataset, spec: &BasisSpec, lattice_size: usize) -> Result<Self> {
        let q = spec.dimension();
        let lattice = build_lattice_basis(spec, lattice_size)?;
        let stats = dataset
            .curves
            .par_iter()
            .map(|c| {
                if c.len() < q {
                    return Err(Error::Validation(format!(
                        "curve has {} points, fewer than the basis dimension {q}",
                        c.len()
                    ))
                    .at_site(&c.site_id));
                }
                let s = evaluate_basis(spec, &c.times).map_err(|e| e.at_site(&c.site_id))?;
                Ok(CurveStats::new(&c.values, &s.values))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            lattice,
            stats,
            site_ids: dataset.site_ids().map(str::to_string).collect(),
        })
    }

    pub fn n_curves(&self) -> usize {
        self.stats.len()
    }

    pub fn dimension(&self) -> usize {
        self.spec.dimension()
    }

    pub fn total_points(&self) -> usize {
        self.stats.iter().map(|s| s.n).sum()
    }

    /// Statistics under the working basis `S T`.
    pub fn working_stats(&self, t: &OrthoTransform) -> Vec<CurveStats> {
        self.stats.par_iter().map(|s| s.transformed(t)).collect()
    }
}

/// Working-basis statistics and per-curve kernels for one parameter state.
pub(crate) struct Evaluator {
    pub stats: Vec<CurveStats>,
    pub kernels: Vec<CurveKernel>,
}

impl Evaluator {
    pub fn new(
        design: &FunctionalDesign,
        transform: &OrthoTransform,
        cov: &CovParams,
    ) -> Result<Self> {
        let stats = design.working_stats(transform);
        Self::from_stats(design, stats, cov)
    }

    pub fn from_stats(
        design: &FunctionalDesign,
        stats: Vec<CurveStats>,
        cov: &CovParams,
    ) -> Result<Self> {
        let factor = CovFactor::new(cov)?;
        let kernels = stats
            .par_iter()
            .zip(&design.site_ids)
            .map(|(s, id)| factor.kernel(&s.gram).map_err(|e| e.at_site(id)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stats, kernels })
    }

    pub fn density_matrix(
        &self,
        clusters: &ClusterParams,
        site_ids: &[String],
    ) -> Result<DMatrix<f64>> {
        let c = clusters.n_clusters();
        let means: Vec<DVector<f64>> = (0..c).map(|k| clusters.mean(k)).collect();
        let rows: Vec<Vec<f64>> = self
            .stats
            .par_iter()
            .zip(&self.kernels)
            .map(|(s, ker)| means.iter().map(|a| ker.loglik(s, a)).collect())
            .collect();
        let mut out = DMatrix::zeros(rows.len(), c);
        for (i, row) in rows.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Validation(format!(
                        "non-finite log density for cluster {}",
                        k + 1
                    ))
                    .at_site(&site_ids[i]));
                }
                out[(i, k)] = v;
            }
        }
        Ok(out)
    }
}

/// `log f(Y_i | Z_i = k)` for every curve and cluster.
pub fn density_matrix(design: &FunctionalDesign, params: &ModelParams) -> Result<DMatrix<f64>> {
    Evaluator::new(design, &params.transform, &params.cov)?
        .density_matrix(&params.clusters, &design.site_ids)
}

/// `Σ_i log f(Y_i | Z_i)`.
pub fn observed_loglik(
    design: &FunctionalDesign,
    z: &LabelField,
    params: &ModelParams,
) -> Result<f64> {
    let d = density_matrix(design, params)?;
    Ok((0..z.len()).map(|i| d[(i, z.get(i))]).sum())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MStepOptions {
    /// Hold `Γ = 0` (plain Gaussian functional mixture).
    pub fix_gamma_zero: bool,
}

/// One hard-label update of `(α, Γ, σ²)` at fixed labels.
///
/// `α_k` is the GLS estimate under the current `Σ_i`; the random-effect
/// posteriors are then taken at the new `α` and drive the usual EM updates
/// of `Γ` and `σ²`. Both stages are ascent steps for the observed-data
/// likelihood.
pub fn m_step(
    design: &FunctionalDesign,
    z: &LabelField,
    params: &ModelParams,
    options: MStepOptions,
) -> Result<(ClusterParams, CovParams)> {
    let eval = Evaluator::new(design, &params.transform, &params.cov)?;
    m_step_with(&eval, design, z, options)
}

pub(crate) fn m_step_with(
    eval: &Evaluator,
    design: &FunctionalDesign,
    z: &LabelField,
    options: MStepOptions,
) -> Result<(ClusterParams, CovParams)> {
    let q = design.dimension();
    let c = z.n_clusters();
    let n = z.len();

    let terms: Vec<(DMatrix<f64>, DVector<f64>)> = eval
        .stats
        .par_iter()
        .zip(&eval.kernels)
        .map(|(s, k)| k.gls_terms(s))
        .collect();
    let mut a_sum = vec![DMatrix::<f64>::zeros(q, q); c];
    let mut b_sum = vec![DVector::<f64>::zeros(q); c];
    let mut counts = vec![0usize; c];
    for (i, (a, b)) in terms.iter().enumerate() {
        let k = z.get(i);
        a_sum[k] += a;
        b_sum[k] += b;
        counts[k] += 1;
    }
    let mut alpha = DMatrix::zeros(c, q);
    for k in 0..c {
        if counts[k] == 0 {
            return Err(Error::EmptyCluster(k));
        }
        let chol = cholesky(&a_sum[k], &format!("GLS system of cluster {}", k + 1))?;
        alpha.set_row(k, &chol.solve(&b_sum[k]).transpose());
    }
    let clusters = ClusterParams { alpha };

    let total_points: usize = eval.stats.iter().map(|s| s.n).sum();
    let mut gamma_acc = DMatrix::<f64>::zeros(q, q);
    let mut resid_acc = 0.0;
    let parts: Vec<(DMatrix<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = &eval.stats[i];
            let a = clusters.mean(z.get(i));
            let post = eval.kernels[i].posterior(s, &a);
            let outer = &post.mean * post.mean.transpose() + &post.cov;
            let fitted = &a + &post.mean;
            let resid = s.rss(&fitted) + (&s.gram * &post.cov).trace();
            (outer, resid)
        })
        .collect();
    for (outer, resid) in parts {
        gamma_acc += outer;
        resid_acc += resid;
    }
    let gamma = if options.fix_gamma_zero {
        DMatrix::zeros(q, q)
    } else {
        project_psd(&(gamma_acc / n as f64))
    };
    let sigma2 = (resid_acc / total_points as f64).max(SIGMA2_MIN);
    Ok((clusters, CovParams { gamma, sigma2 }))
}

const SNAPSHOT_MAGIC: &str = "spatial-fclust params";
const SNAPSHOT_VERSION: u32 = 1;

fn write_matrix<W: Write>(w: &mut W, name: &str, m: &DMatrix<f64>) -> std::io::Result<()> {
    writeln!(w, "[{name}] {} {}", m.nrows(), m.ncols())?;
    for r in 0..m.nrows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

/// Writes the parameter snapshot: versioned header, `key = value` scalars,
/// then labeled matrices (`[name] rows cols` followed by rows).
pub fn write_snapshot<W: Write>(
    writer: W,
    params: &ModelParams,
    header_comment: &str,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(writer);
    let io = |e| Error::io("params snapshot", e);
    (|| -> std::io::Result<()> {
        writeln!(w, "# {SNAPSHOT_MAGIC} v{SNAPSHOT_VERSION}")?;
        write_comment(&mut w, header_comment)?;
        match &params.basis {
            BasisSpec::BSpline {
                order,
                interior_knots,
            } => {
                writeln!(w, "basis.kind = bspline")?;
                writeln!(w, "basis.order = {order}")?;
                let k: Vec<String> = interior_knots.iter().map(|v| format!("{v:?}")).collect();
                writeln!(w, "basis.knots = {}", k.join(","))?;
            }
            BasisSpec::Fourier { .. } => writeln!(w, "basis.kind = fourier")?,
        }
        writeln!(w, "basis.q = {}", params.basis.dimension())?;
        writeln!(w, "clusters = {}", params.mrf.n_clusters)?;
        writeln!(w, "theta = {:?}", params.mrf.theta)?;
        writeln!(w, "sigma2 = {:?}", params.cov.sigma2)?;
        write_matrix(&mut w, "alpha", &params.clusters.alpha)?;
        write_matrix(&mut w, "gamma", &params.cov.gamma)?;
        write_matrix(&mut w, "transform", &params.transform.t)?;
        write_matrix(&mut w, "transform_inv", &params.transform.t_inv)?;
        write_matrix(&mut w, "alpha_raw", &params.raw_alpha())?;
        w.flush()
    })()
    .map_err(io)
}

pub fn read_snapshot<R: BufRead>(reader: R) -> Result<ModelParams> {
    let bad = |line: usize, msg: String| Error::Parse {
        source_name: "params snapshot".into(),
        line: line as u64,
        message: msg,
    };
    let lines: Vec<String> = reader
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io("params snapshot", e))?;
    let header = format!("# {SNAPSHOT_MAGIC} v{SNAPSHOT_VERSION}");
    if lines.first().map(String::as_str) != Some(header.as_str()) {
        return Err(bad(1, format!("expected header {header:?}")));
    }
    let mut scalars = std::collections::BTreeMap::new();
    let mut matrices = std::collections::BTreeMap::new();
    let mut idx = 1;
    while idx < lines.len() {
        let line = lines[idx].trim();
        idx += 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let (name, dims) = rest
                .split_once(']')
                .ok_or_else(|| bad(idx, "unterminated matrix label".into()))?;
            let dims: Vec<usize> = dims
                .split_whitespace()
                .map(|d| {
                    d.parse()
                        .map_err(|_| bad(idx, format!("bad dimension {d:?}")))
                })
                .collect::<Result<_>>()?;
            let [rows, cols] = dims[..] else {
                return Err(bad(idx, "matrix label needs rows and cols".into()));
            };
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let row = lines
                    .get(idx)
                    .ok_or_else(|| bad(idx, format!("matrix {name} truncated")))?;
                idx += 1;
                for v in row.split_whitespace() {
                    data.push(
                        v.parse::<f64>()
                            .map_err(|_| bad(idx, format!("bad number {v:?}")))?,
                    );
                }
            }
            if data.len() != rows * cols {
                return Err(bad(idx, format!("matrix {name} has wrong entry count")));
            }
            matrices.insert(name.to_string(), DMatrix::from_row_slice(rows, cols, &data));
        } else {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(idx, format!("expected key = value, got {line:?}")))?;
            scalars.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| {
        scalars
            .get(k)
            .ok_or_else(|| bad(0, format!("missing key {k}")))
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| bad(0, format!("bad value for {k}")))
    };
    let int = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| bad(0, format!("bad value for {k}")))
    };
    let q = int("basis.q")?;
    let basis = match get("basis.kind")?.as_str() {
        "bspline" => {
            let knots = get("basis.knots")?;
            let knots: Vec<f64> = if knots.is_empty() {
                Vec::new()
            } else {
                knots
                    .split(',')
                    .map(|v| {
                        v.trim()
                            .parse()
                            .map_err(|_| bad(0, format!("bad knot {v:?}")))
                    })
                    .collect::<Result<_>>()?
            };
            BasisSpec::bspline(int("basis.order")?, knots)?
        }
        "fourier" => BasisSpec::fourier(q)?,
        other => return Err(bad(0, format!("unknown basis kind {other:?}"))),
    };
    let mat = |k: &str| {
        matrices
            .get(k)
            .cloned()
            .ok_or_else(|| bad(0, format!("missing matrix {k}")))
    };
    let params = ModelParams {
        clusters: ClusterParams {
            alpha: mat("alpha")?,
        },
        cov: CovParams {
            gamma: mat("gamma")?,
            sigma2: num("sigma2")?,
        },
        mrf: MrfParams {
            theta: num("theta")?,
            n_clusters: int("clusters")?,
        },
        basis,
        transform: OrthoTransform {
            t: mat("transform")?,
            t_inv: mat("transform_inv")?,
        },
    };
    if params.clusters.alpha.shape() != (params.mrf.n_clusters, q)
        || params.cov.gamma.shape() != (q, q)
        || params.transform.t.shape() != (q, q)
    {
        return Err(bad(
            0,
            "matrix dimensions disagree with basis.q / clusters".into(),
        ));
    }
    Ok(params)
}
