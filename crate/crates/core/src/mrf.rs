//! Gibbs (Potts-type) conditional law for the cluster labels:
//!
//! `P(Z_i = k | Z_∂i) = exp(U_ik) / Σ_l exp(U_il)`, with
//! `U_ik = θ Σ_{j ∈ ∂i} w_ij I(Z_j = k)`.
//!
//! Labels are stored 0-based (`0..C`); file formats print them 1-based.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::NeighborGraph;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelField {
    labels: Vec<usize>,
    n_clusters: usize,
}

impl LabelField {
    pub fn new(labels: Vec<usize>, n_clusters: usize) -> Result<Self> {
        if n_clusters == 0 {
            return Err(Error::Config("number of clusters must be >= 1".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_clusters) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {n_clusters} clusters"
            )));
        }
        Ok(Self { labels, n_clusters })
    }

    pub fn uniform_random<R: Rng + ?Sized>(n: usize, n_clusters: usize, rng: &mut R) -> Self {
        Self {
            labels: (0..n).map(|_| rng.random_range(0..n_clusters)).collect(),
            n_clusters,
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn set(&mut self, i: usize, k: usize) {
        assert!(k < self.n_clusters, "label {k} out of range");
        self.labels[i] = k;
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_clusters];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Applies `map[old] = new` to every label.
    pub fn relabel(&self, map: &[usize]) -> Self {
        Self {
            labels: self.labels.iter().map(|&l| map[l]).collect(),
            n_clusters: self.n_clusters,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MrfParams {
    pub theta: f64,
    pub n_clusters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScanOrder {
    /// Ascending site index.
    #[default]
    Systematic,
    /// A fresh uniformly random permutation per sweep.
    Random,
}

/// Site visiting order for one sweep.
pub fn visit_order<R: Rng + ?Sized>(n: usize, order: ScanOrder, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if order == ScanOrder::Random {
        use rand::seq::SliceRandom;
        idx.shuffle(rng);
    }
    idx
}

/// `U_ik = θ Σ_{j ∈ ∂i} w_ij I(Z_j = k)`.
pub fn local_energy(i: usize, k: usize, z: &LabelField, g: &NeighborGraph, theta: f64) -> f64 {
    theta
        * g.neighbors(i)
            .iter()
            .filter(|&&(j, _)| z.get(j) == k)
            .map(|&(_, w)| w)
            .sum::<f64>()
}

/// Weighted like-label counts `Σ_j w_ij I(Z_j = k)` for every `k`.
fn neighbor_weights(i: usize, z: &LabelField, g: &NeighborGraph, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for &(j, w) in g.neighbors(i) {
        out[z.get(j)] += w;
    }
}

/// Normalizes `exp(scores)` in place, subtracting the max first.
pub(crate) fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    for s in scores.iter_mut() {
        *s /= total;
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn conditional_probs(
    i: usize,
    z: &LabelField,
    g: &NeighborGraph,
    params: &MrfParams,
) -> Vec<f64> {
    let mut p = vec![0.0; params.n_clusters];
    neighbor_weights(i, z, g, &mut p);
    p.iter_mut().for_each(|v| *v *= params.theta);
    softmax_in_place(&mut p);
    p
}

fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.len() - 1
}

/// One systematic-scan Gibbs sweep.
pub fn gibbs_sweep<R: Rng + ?Sized>(
    z: &mut LabelField,
    g: &NeighborGraph,
    params: &MrfParams,
    rng: &mut R,
) {
    let order: Vec<usize> = (0..z.len()).collect();
    gibbs_sweep_in_order(z, g, params, &order, rng);
}

pub fn gibbs_sweep_in_order<R: Rng + ?Sized>(
    z: &mut LabelField,
    g: &NeighborGraph,
    params: &MrfParams,
    order: &[usize],
    rng: &mut R,
) {
    for &i in order {
        let p = conditional_probs(i, z, g, params);
        let k = sample_categorical(&p, rng);
        z.set(i, k);
    }
}

/// One ICM sweep in ascending site order; returns the number of changed
/// labels. `log_dens[(i, k)] = log f(Y_i | Z_i = k)`.
pub fn icm_sweep(
    z: &mut LabelField,
    log_dens: &DMatrix<f64>,
    g: &NeighborGraph,
    theta: f64,
) -> usize {
    let order: Vec<usize> = (0..z.len()).collect();
    icm_sweep_in_order(z, log_dens, g, theta, &order)
}

/// `Z_i ← argmax_k [log f(Y_i | k) + U_ik]` with the latest labels; ties
/// go to the smallest `k`.
pub fn icm_sweep_in_order(
    z: &mut LabelField,
    log_dens: &DMatrix<f64>,
    g: &NeighborGraph,
    theta: f64,
    order: &[usize],
) -> usize {
    let c = z.n_clusters();
    let mut counts = vec![0.0; c];
    let mut changed = 0;
    for &i in order {
        neighbor_weights(i, z, g, &mut counts);
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (k, &cnt) in counts.iter().enumerate() {
            let score = log_dens[(i, k)] + theta * cnt;
            if score > best_score {
                best_score = score;
                best = k;
            }
        }
        if best != z.get(i) {
            z.set(i, best);
            changed += 1;
        }
    }
    changed
}

/// `Σ_i log f(Y_i | Z_i) + θ Σ_{(i,j) ∈ E} w_ij I(Z_i = Z_j)`: the objective
/// ICM ascends.
pub fn icm_objective(
    z: &LabelField,
    log_dens: &DMatrix<f64>,
    g: &NeighborGraph,
    theta: f64,
) -> f64 {
    let data: f64 = (0..z.len()).map(|i| log_dens[(i, z.get(i))]).sum();
    let agree: f64 = g
        .edges()
        .filter(|&(i, j, _)| z.get(i) == z.get(j))
        .map(|(_, _, w)| w)
        .sum();
    data + theta * agree
}

/// Fraction of edges joining differently labeled sites (unweighted).
pub fn discordant_fraction(z: &LabelField, g: &NeighborGraph) -> f64 {
    let total = g.edge_count();
    if total == 0 {
        return 0.0;
    }
    g.edges().filter(|&(i, j, _)| z.get(i) != z.get(j)).count() as f64 / total as f64
}

/// Per-site neighbor weight totals, cached so the pseudo-likelihood can be
/// evaluated for many θ on a fixed field.
#[derive(Debug, Clone)]
pub struct PseudoLikelihood {
    /// `counts[i * C + k] = Σ_j w_ij I(Z_j = k)`.
    counts: Vec<f64>,
    own: Vec<f64>,
    n_clusters: usize,
}

impl PseudoLikelihood {
    pub fn new(z: &LabelField, g: &NeighborGraph) -> Self {
        let c = z.n_clusters();
        let mut counts = vec![0.0; z.len() * c];
        let mut own = vec![0.0; z.len()];
        for i in 0..z.len() {
            neighbor_weights(i, z, g, &mut counts[i * c..(i + 1) * c]);
            own[i] = counts[i * c + z.get(i)];
        }
        Self {
            counts,
            own,
            n_clusters: c,
        }
    }

    /// `Σ_i log P(Z_i | Z_∂i; θ)`.
    pub fn eval(&self, theta: f64) -> f64 {
        let c = self.n_clusters;
        let mut buf = vec![0.0; c];
        let mut total = 0.0;
        for (i, &own) in self.own.iter().enumerate() {
            for (b, &cnt) in buf.iter_mut().zip(&self.counts[i * c..(i + 1) * c]) {
                *b = theta * cnt;
            }
            total += theta * own - log_sum_exp(&buf);
        }
        total
    }
}

pub fn log_pseudo_likelihood(z: &LabelField, g: &NeighborGraph, theta: f64) -> f64 {
    PseudoLikelihood::new(z, g).eval(theta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaEstimate {
    pub theta: f64,
    pub log_pl: f64,
    /// The maximizer sits at (within tolerance of) a bound of the interval.
    pub at_boundary: bool,
}

pub const THETA_TOL: f64 = 1e-5;

/// Maximum pseudo-likelihood θ on `[lo, hi]` by golden-section search.
pub fn fit_theta(z: &LabelField, g: &NeighborGraph, bounds: (f64, f64)) -> Result<ThetaEstimate> {
    let (lo, hi) = bounds;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Config(format!("invalid θ bounds [{lo}, {hi}]")));
    }
    let pl = PseudoLikelihood::new(z, g);
    let f = |t: f64| pl.eval(t);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > THETA_TOL {
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        }
    }
    let mid = 0.5 * (a + b);
    let mut best = (mid, f(mid));
    for t in [lo, hi] {
        let v = f(t);
        if v > best.1 {
            best = (t, v);
        }
    }
    let at_boundary = best.0 - lo <= 2.0 * THETA_TOL || hi - best.0 <= 2.0 * THETA_TOL;
    Ok(ThetaEstimate {
        theta: best.0,
        log_pl: best.1,
        at_boundary,
    })
}
