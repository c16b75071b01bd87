//! Estimation driver: alternate ICM label updates with the hard-label
//! M-step and a pseudo-likelihood update of θ, re-imposing the identifiable
//! basis parameterization each iteration.
//!
//! The tracked objective is
//! `J = Σ_i log f(Y_i | Z_i) + Σ_i log P(Z_i | Z_∂i; θ)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::basis::{orthogonalize, BasisSpec, OrthoTransform, DEFAULT_LATTICE};
use crate::curves::Dataset;
use crate::error::{Error, Result};
use crate::graph::NeighborGraph;
use crate::model::{
    m_step_with, ClusterParams, CovParams, Evaluator, FunctionalDesign, MStepOptions, ModelParams,
    SIGMA2_MIN,
};
use crate::mrf::{
    fit_theta, icm_objective, icm_sweep_in_order, local_energy, log_pseudo_likelihood,
    softmax_in_place, visit_order, LabelField, MrfParams, ScanOrder,
};

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub n_clusters: usize,
    pub max_iter: usize,
    pub icm_sweeps_per_iter: usize,
    /// Relative change of `J` that counts as converged.
    pub tol: f64,
    pub seed: u64,
    pub restarts: usize,
    pub basis: BasisSpec,
    pub lattice_size: usize,
    pub theta_init: f64,
    pub theta_bounds: (f64, f64),
    /// Hold θ at this value instead of estimating it.
    pub fixed_theta: Option<f64>,
    pub fix_gamma_zero: bool,
    pub scan_order: ScanOrder,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_clusters: 3,
            max_iter: 100,
            icm_sweeps_per_iter: 3,
            tol: 1e-6,
            seed: 0,
            restarts: 5,
            basis: BasisSpec::default(),
            lattice_size: DEFAULT_LATTICE,
            theta_init: 0.5,
            theta_bounds: (0.0, 10.0),
            fixed_theta: None,
            fix_gamma_zero: false,
            scan_order: ScanOrder::Systematic,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_clusters == 0 {
            return bad("number of clusters must be >= 1".into());
        }
        if self.max_iter == 0 || self.icm_sweeps_per_iter == 0 || self.restarts == 0 {
            return bad("max_iter, icm_sweeps_per_iter and restarts must be positive".into());
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        let (lo, hi) = self.theta_bounds;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad(format!("invalid θ bounds [{lo}, {hi}]"));
        }
        if !self.theta_init.is_finite() || self.fixed_theta.is_some_and(|t| !t.is_finite()) {
            return bad("θ must be finite".into());
        }
        self.basis.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub labels: LabelField,
    pub params: ModelParams,
    /// `J` after each iteration.
    pub objective_trace: Vec<f64>,
    /// ICM objective before the first sweep and after each sweep, one list
    /// per iteration.
    pub icm_trace: Vec<Vec<f64>>,
    /// `J` recomputed at the returned labels and parameters.
    pub objective: f64,
    pub conditional_posteriors: DMatrix<f64>,
    pub pseudo_bic: f64,
    pub converged: bool,
    pub iterations: usize,
    pub theta_at_boundary: bool,
    /// Index of the winning restart.
    pub restart: usize,
}

/// k-means with k-means++ seeding. Empty clusters are re-seeded with the
/// point farthest from its center.
pub(crate) fn kmeans(
    points: &[DVector<f64>],
    k: usize,
    iters: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let n = points.len();
    let dist2 = |a: &DVector<f64>, b: &DVector<f64>| (a - b).norm_squared();
    let mut centers: Vec<DVector<f64>> = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            d2.iter()
                .position(|&d| {
                    acc += d;
                    acc > u
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &centers[centers.len() - 1]));
        }
    }
    let nearest = |p: &DVector<f64>, centers: &[DVector<f64>]| {
        let mut best = (f64::INFINITY, 0);
        for (c, ctr) in centers.iter().enumerate() {
            let d = dist2(p, ctr);
            if d < best.0 {
                best = (d, c);
            }
        }
        best
    };
    let mut labels = vec![usize::MAX; n];
    for _ in 0..iters {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (_, c) = nearest(p, &centers);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        fill_empty(points, &mut labels, &centers, k);
        let dim = points[0].len();
        let mut sums = vec![DVector::<f64>::zeros(dim); k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l] += p;
            counts[l] += 1;
        }
        for c in 0..k {
            centers[c] = &sums[c] / counts[c] as f64;
        }
        if !changed {
            break;
        }
    }
    labels
}

fn fill_empty(points: &[DVector<f64>], labels: &mut [usize], centers: &[DVector<f64>], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let far = (0..points.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| {
                let da = (&points[a] - &centers[labels[a]]).norm_squared();
                let db = (&points[b] - &centers[labels[b]]).norm_squared();
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("n >= k");
        labels[far] = empty;
    }
}

/// Per-curve least-squares basis coefficients clustered by k-means.
pub fn initialize_labels(
    design: &FunctionalDesign,
    n_clusters: usize,
    seed: u64,
) -> Result<LabelField> {
    let n = design.n_curves();
    if n < n_clusters {
        return Err(Error::Config(format!(
            "{n} curves cannot fill {n_clusters} clusters"
        )));
    }
    if n_clusters == 1 {
        return LabelField::new(vec![0; n], 1);
    }
    let coefs = ols_coefficients(design)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LabelField::new(kmeans(&coefs, n_clusters, 50, &mut rng), n_clusters)
}

fn ols_coefficients(design: &FunctionalDesign) -> Result<Vec<DVector<f64>>> {
    design
        .stats
        .iter()
        .zip(&design.site_ids)
        .map(|(s, id)| s.ols().map_err(|e| e.at_site(id)))
        .collect()
}

/// Starting parameters from labels: cluster means and spread of per-curve
/// least-squares coefficients, pooled residual variance.
fn initial_params(
    design: &FunctionalDesign,
    z: &LabelField,
    config: &FitConfig,
) -> Result<ModelParams> {
    let q = design.dimension();
    let c = z.n_clusters();
    let coefs = ols_coefficients(design)?;
    let mut alpha = DMatrix::zeros(c, q);
    let counts = z.counts();
    for (i, b) in coefs.iter().enumerate() {
        let k = z.get(i);
        let mut row = alpha.row_mut(k);
        row += b.transpose() / counts[k] as f64;
    }
    let mut gamma = DMatrix::zeros(q, q);
    let mut rss = 0.0;
    for (i, b) in coefs.iter().enumerate() {
        let d = b - alpha.row(z.get(i)).transpose();
        gamma += &d * d.transpose();
        let s = &design.stats[i];
        rss += (s.yty - 2.0 * b.dot(&s.sty) + b.dot(&(&s.gram * b))).max(0.0);
    }
    let gamma = if config.fix_gamma_zero {
        DMatrix::zeros(q, q)
    } else {
        gamma / design.n_curves() as f64
    };
    let sigma2 = (rss / design.total_points() as f64).max(SIGMA2_MIN.max(1e-6));
    Ok(ModelParams {
        clusters: ClusterParams { alpha },
        cov: CovParams { gamma, sigma2 },
        mrf: MrfParams {
            theta: config.fixed_theta.unwrap_or(config.theta_init),
            n_clusters: c,
        },
        basis: design.spec.clone(),
        transform: OrthoTransform::identity(q),
    })
}

/// `J` at the given labels and parameters.
pub fn objective(
    design: &FunctionalDesign,
    graph: &NeighborGraph,
    z: &LabelField,
    params: &ModelParams,
) -> Result<f64> {
    let eval = Evaluator::new(design, &params.transform, &params.cov)?;
    let dens = eval.density_matrix(&params.clusters, &design.site_ids)?;
    Ok(data_term(&dens, z) + log_pseudo_likelihood(z, graph, params.mrf.theta))
}

fn data_term(dens: &DMatrix<f64>, z: &LabelField) -> f64 {
    (0..z.len()).map(|i| dens[(i, z.get(i))]).sum()
}

/// Softmax over `k` of `log f(Y_i | k) + U_ik(θ)`, neighbors held at `z`.
pub fn conditional_posteriors(
    design: &FunctionalDesign,
    graph: &NeighborGraph,
    z: &LabelField,
    params: &ModelParams,
) -> Result<DMatrix<f64>> {
    let eval = Evaluator::new(design, &params.transform, &params.cov)?;
    let dens = eval.density_matrix(&params.clusters, &design.site_ids)?;
    Ok(posteriors_from_densities(&dens, graph, z, params.mrf.theta))
}

fn posteriors_from_densities(
    dens: &DMatrix<f64>,
    graph: &NeighborGraph,
    z: &LabelField,
    theta: f64,
) -> DMatrix<f64> {
    let c = z.n_clusters();
    let mut out = DMatrix::zeros(z.len(), c);
    let mut row = vec![0.0; c];
    for i in 0..z.len() {
        for (k, r) in row.iter_mut().enumerate() {
            *r = dens[(i, k)] + local_energy(i, k, z, graph, theta);
        }
        softmax_in_place(&mut row);
        for (k, &p) in row.iter().enumerate() {
            out[(i, k)] = p;
        }
    }
    out
}

/// Parameter count used by the pseudo-BIC: cluster means, Γ, σ², θ.
pub fn parameter_count(n_clusters: usize, q: usize) -> usize {
    n_clusters * q + q * (q + 1) / 2 + 2
}

pub fn pseudo_bic(objective: f64, n_clusters: usize, q: usize, n: usize) -> f64 {
    -2.0 * objective + parameter_count(n_clusters, q) as f64 * (n as f64).ln()
}

/// Relabels clusters by descending size, ties by smallest member index.
/// Returns `map[old] = new`.
pub fn canonical_order(z: &LabelField) -> Vec<usize> {
    let c = z.n_clusters();
    let counts = z.counts();
    let mut first = vec![usize::MAX; c];
    for (i, &l) in z.labels().iter().enumerate() {
        first[l] = first[l].min(i);
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(first[a].cmp(&first[b])));
    let mut map = vec![0; c];
    for (new, &old) in order.iter().enumerate() {
        map[old] = new;
    }
    map
}

fn relabel_params(params: &ModelParams, map: &[usize]) -> ModelParams {
    let mut alpha = params.clusters.alpha.clone();
    for (old, &new) in map.iter().enumerate() {
        alpha.set_row(new, &params.clusters.alpha.row(old));
    }
    ModelParams {
        clusters: ClusterParams { alpha },
        ..params.clone()
    }
}

/// Moves the worst-fitting curves into empty clusters.
fn reseed_empty(z: &mut LabelField, dens: &DMatrix<f64>) {
    loop {
        let counts = z.counts();
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let worst = (0..z.len())
            .filter(|&i| counts[z.get(i)] > 1)
            .min_by(|&a, &b| {
                dens[(a, z.get(a))]
                    .total_cmp(&dens[(b, z.get(b))])
                    .then(a.cmp(&b))
            });
        match worst {
            Some(i) => z.set(i, empty),
            None => return,
        }
    }
}

fn check_finite(v: f64, iteration: usize, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            iteration,
            detail: format!("{what} = {v}"),
        })
    }
}

/// Fits from the given initial labels with a single run.
pub fn fit_from_labels(
    design: &FunctionalDesign,
    graph: &NeighborGraph,
    config: &FitConfig,
    init: LabelField,
    seed: u64,
) -> Result<FitResult> {
    config.validate()?;
    if graph.n_sites() != design.n_curves() || init.len() != design.n_curves() {
        return Err(Error::Validation(format!(
            "graph has {} sites, labels {}, dataset {} curves",
            graph.n_sites(),
            init.len(),
            design.n_curves()
        )));
    }
    let n = design.n_curves();
    let c = init.n_clusters();
    let q = design.dimension();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f1c);
    let mut z = init;
    let mut params = initial_params(design, &z, config)?;
    let options = MStepOptions {
        fix_gamma_zero: config.fix_gamma_zero,
    };
    let estimate_theta = config.fixed_theta.is_none() && c > 1;

    let mut trace = Vec::new();
    let mut icm_trace = Vec::new();
    let mut converged = false;
    let mut theta_at_boundary = false;
    let mut iterations = 0;
    for iter in 1..=config.max_iter {
        iterations = iter;
        // identifiable basis for the current (Γ, σ²)
        let total = orthogonalize(&design.lattice, &params.raw_gamma(), params.cov.sigma2)?;
        params = params.retransformed(&total);

        let stats = design.working_stats(&params.transform);
        let eval = Evaluator::from_stats(design, stats, &params.cov)?;
        let dens = eval.density_matrix(&params.clusters, &design.site_ids)?;
        let theta = params.mrf.theta;
        let mut sweeps = vec![icm_objective(&z, &dens, graph, theta)];
        for _ in 0..config.icm_sweeps_per_iter {
            let order = visit_order(n, config.scan_order, &mut rng);
            let changed = icm_sweep_in_order(&mut z, &dens, graph, theta, &order);
            sweeps.push(icm_objective(&z, &dens, graph, theta));
            if changed == 0 {
                break;
            }
        }
        icm_trace.push(sweeps);
        reseed_empty(&mut z, &dens);

        let (clusters, cov) = m_step_with(&eval, design, &z, options)?;
        params.clusters = clusters;
        params.cov = cov;
        if estimate_theta {
            let est = fit_theta(&z, graph, config.theta_bounds)?;
            params.mrf.theta = est.theta;
            theta_at_boundary = est.at_boundary;
        }

        let j = check_finite(objective(design, graph, &z, &params)?, iter, "J")?;
        let prev = trace.last().copied();
        trace.push(j);
        if let Some(prev) = prev {
            if (j - prev).abs() <= config.tol * prev.abs().max(1.0) {
                converged = true;
                break;
            }
        }
    }

    let total = orthogonalize(&design.lattice, &params.raw_gamma(), params.cov.sigma2)?;
    params = params.retransformed(&total);
    let map = canonical_order(&z);
    let z = z.relabel(&map);
    let params = relabel_params(&params, &map);

    let eval = Evaluator::new(design, &params.transform, &params.cov)?;
    let dens = eval.density_matrix(&params.clusters, &design.site_ids)?;
    let objective = check_finite(
        data_term(&dens, &z) + log_pseudo_likelihood(&z, graph, params.mrf.theta),
        iterations,
        "final J",
    )?;
    let posteriors = posteriors_from_densities(&dens, graph, &z, params.mrf.theta);
    Ok(FitResult {
        pseudo_bic: pseudo_bic(objective, c, q, n),
        labels: z,
        params,
        objective_trace: trace,
        icm_trace,
        objective,
        conditional_posteriors: posteriors,
        converged,
        iterations,
        theta_at_boundary,
        restart: 0,
    })
}

fn restart_seed(seed: u64, restart: usize) -> u64 {
    seed.wrapping_add((restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Best of `config.restarts` runs by final `J` (ties to the lower restart
/// index).
pub fn fit_design(
    design: &FunctionalDesign,
    graph: &NeighborGraph,
    config: &FitConfig,
) -> Result<FitResult> {
    config.validate()?;
    let runs: Vec<Result<FitResult>> = (0..config.restarts)
        .into_par_iter()
        .map(|r| {
            let seed = restart_seed(config.seed, r);
            let init = initialize_labels(design, config.n_clusters, seed)?;
            let mut res = fit_from_labels(design, graph, config, init, seed)?;
            res.restart = r;
            Ok(res)
        })
        .collect();
    let mut best: Option<FitResult> = None;
    let mut first_err = None;
    for run in runs {
        match run {
            Ok(res) => {
                if best.as_ref().is_none_or(|b| res.objective > b.objective) {
                    best = Some(res);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.expect("at least one restart"))
}

pub fn fit(dataset: &Dataset, graph: &NeighborGraph, config: &FitConfig) -> Result<FitResult> {
    let design = FunctionalDesign::new(dataset, &config.basis, config.lattice_size)?;
    fit_design(&design, graph, config)
}

#[derive(Debug)]
pub struct Selection {
    pub best: usize,
    /// `(C, result)` in candidate order.
    pub fits: Vec<(usize, Result<FitResult>)>,
}

impl Selection {
    pub fn best_fit(&self) -> &FitResult {
        self.fits
            .iter()
            .find(|(c, _)| *c == self.best)
            .and_then(|(_, r)| r.as_ref().ok())
            .expect("best candidate has a fit")
    }
}

/// Fits every candidate cluster count and picks the smallest pseudo-BIC,
/// ties to the smaller count. A failing candidate is reported and skipped.
pub fn select_clusters(
    design: &FunctionalDesign,
    graph: &NeighborGraph,
    config: &FitConfig,
    candidates: &[usize],
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidate cluster counts".into()));
    }
    let fits: Vec<(usize, Result<FitResult>)> = candidates
        .par_iter()
        .map(|&c| {
            let cfg = FitConfig {
                n_clusters: c,
                ..config.clone()
            };
            (c, fit_design(design, graph, &cfg))
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (c, res) in &fits {
        if let Ok(r) = res {
            let better = match best {
                None => true,
                Some((bc, bb)) => r.pseudo_bic < bb || (r.pseudo_bic == bb && *c < bc),
            };
            if better {
                best = Some((*c, r.pseudo_bic));
            }
        }
    }
    match best {
        Some((c, _)) => Ok(Selection { best: c, fits }),
        None => Err(fits
            .into_iter()
            .find_map(|(_, r)| r.err())
            .expect("every candidate failed")),
    }
}
