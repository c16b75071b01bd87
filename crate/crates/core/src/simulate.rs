//! Synthetic data from the full generative model: site geometry, a Gibbs
//! label field on the neighbor graph, then curves
//! `Y_i = S_i (α_{Z_i} + γ_i) + ε_i`.

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::basis::{evaluate_basis, BasisSpec};
use crate::curves::{daily_grid, day_of_year, AnnualCurve, Dataset, RawObservation, SiteGeometry};
use crate::error::{Error, Result};
use crate::graph::{GraphConfig, NeighborGraph};
use crate::linalg::psd_factor;
use crate::mrf::{discordant_fraction, gibbs_sweep, LabelField, MrfParams};

#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    pub n_sites: usize,
    /// Used instead of random placement when set.
    pub geometry: Option<Vec<SiteGeometry>>,
    pub lat_range: (f64, f64),
    pub lon_range: (f64, f64),
    pub elevation_range: (f64, f64),
    pub graph: GraphConfig,
    pub theta: f64,
    pub n_clusters: usize,
    /// Cluster means in the raw basis, one row per cluster. `None` gives
    /// phase-shifted sinusoidal profiles (see [`SimSpec::default_alpha`]).
    pub alpha: Option<DMatrix<f64>>,
    /// Raw-basis coefficients `level + amplitude · sin(·)` for the default
    /// means.
    pub level: f64,
    pub amplitude: f64,
    pub gamma: DMatrix<f64>,
    pub sigma2: f64,
    pub basis: BasisSpec,
    pub times: Vec<f64>,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        let basis = BasisSpec::default();
        let q = basis.dimension();
        Self {
            n_sites: 400,
            geometry: None,
            lat_range: (0.0, 10.0),
            lon_range: (0.0, 10.0),
            elevation_range: (0.0, 1500.0),
            graph: GraphConfig::default(),
            theta: 1.0,
            n_clusters: 3,
            alpha: None,
            level: 12.0,
            amplitude: 5.0,
            gamma: DMatrix::identity(q, q) * 0.25,
            sigma2: 1.0,
            basis,
            times: daily_grid(),
            burn_in: 200,
            seed: 0,
        }
    }
}

impl SimSpec {
    /// `α_k[m] = level + amplitude · sin(2π (m + ½) / q + 2π k / C)`.
    pub fn default_alpha(&self) -> DMatrix<f64> {
        let q = self.basis.dimension();
        let c = self.n_clusters;
        DMatrix::from_fn(c, q, |k, m| {
            let phase =
                2.0 * std::f64::consts::PI * ((m as f64 + 0.5) / q as f64 + k as f64 / c as f64);
            self.level + self.amplitude * phase.sin()
        })
    }

    pub fn alpha(&self) -> DMatrix<f64> {
        self.alpha.clone().unwrap_or_else(|| self.default_alpha())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let n = self.geometry.as_ref().map_or(self.n_sites, Vec::len);
        if n == 0 {
            return bad("simulation needs at least one site".into());
        }
        if self.n_clusters == 0 {
            return bad("simulation needs at least one cluster".into());
        }
        if self.burn_in == 0 {
            return bad("burn-in must be >= 1 sweep".into());
        }
        if !self.theta.is_finite() {
            return bad("θ must be finite".into());
        }
        if !(self.sigma2 >= 0.0) {
            return bad(format!("σ² must be non-negative, got {}", self.sigma2));
        }
        self.basis.validate()?;
        let q = self.basis.dimension();
        if self.gamma.shape() != (q, q) {
            return bad(format!("Γ must be {q} × {q}"));
        }
        if self.alpha().shape() != (self.n_clusters, q) {
            return bad(format!("α must be {} × {q}", self.n_clusters));
        }
        for (lo, hi) in [self.lat_range, self.lon_range, self.elevation_range] {
            if !(lo <= hi) {
                return bad(format!("invalid range [{lo}, {hi}]"));
            }
        }
        if self.times.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return bad("simulation times must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Smallest `L²[0, 1]` distance between two cluster mean curves,
    /// approximated on the daily grid.
    pub fn min_mean_gap(&self) -> Result<f64> {
        let s = evaluate_basis(&self.basis, &daily_grid())?.values;
        let means = &s * self.alpha().transpose();
        let mut gap = f64::INFINITY;
        for a in 0..self.n_clusters {
            for b in a + 1..self.n_clusters {
                let d = means.column(a) - means.column(b);
                gap = gap.min((d.norm_squared() / s.nrows() as f64).sqrt());
            }
        }
        Ok(gap)
    }

    /// Root mean over the daily grid of the per-point marginal variance
    /// `σ² + s(t)ᵀ Γ s(t)`.
    pub fn noise_scale(&self) -> Result<f64> {
        let s = evaluate_basis(&self.basis, &daily_grid())?.values;
        let var: f64 = (0..s.nrows())
            .map(|r| {
                let row = s.row(r);
                self.sigma2 + (row * &self.gamma * row.transpose())[(0, 0)]
            })
            .sum::<f64>()
            / s.nrows() as f64;
        Ok(var.sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BurnInDiagnostics {
    /// Discordant-edge fraction after each sweep.
    pub discordant_trace: Vec<f64>,
    /// Mean over the last 20 sweeps within 1% of the 20 before.
    pub stabilized: bool,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: Dataset,
    pub graph: NeighborGraph,
    pub labels: LabelField,
    pub alpha: DMatrix<f64>,
    pub diagnostics: BurnInDiagnostics,
}

fn site_ids(n: usize) -> Vec<String> {
    let width = n.to_string().len().max(4);
    (1..=n).map(|i| format!("S{i:0width$}")).collect()
}

pub fn sample_geometry<R: Rng + ?Sized>(spec: &SimSpec, rng: &mut R) -> Vec<SiteGeometry> {
    if let Some(g) = &spec.geometry {
        return g.clone();
    }
    let draw = |rng: &mut R, (lo, hi): (f64, f64)| {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        }
    };
    site_ids(spec.n_sites)
        .into_iter()
        .map(|id| {
            let lat = draw(rng, spec.lat_range);
            let lon = draw(rng, spec.lon_range);
            let elev = draw(rng, spec.elevation_range);
            SiteGeometry::new(id, lat, lon, elev)
        })
        .collect()
}

/// i.i.d. uniform labels followed by `burn_in` systematic Gibbs sweeps.
pub fn sample_labels<R: Rng + ?Sized>(
    spec: &SimSpec,
    graph: &NeighborGraph,
    rng: &mut R,
) -> (LabelField, BurnInDiagnostics) {
    let mut z = LabelField::uniform_random(graph.n_sites(), spec.n_clusters, rng);
    let params = MrfParams {
        theta: spec.theta,
        n_clusters: spec.n_clusters,
    };
    let mut trace = Vec::with_capacity(spec.burn_in);
    for _ in 0..spec.burn_in {
        gibbs_sweep(&mut z, graph, &params, rng);
        trace.push(discordant_fraction(&z, graph));
    }
    // windowed means, since single-sweep values are noisy
    let stabilized = trace.len() >= 40 && {
        let n = trace.len();
        let now = trace[n - 20..].iter().sum::<f64>() / 20.0;
        let before = trace[n - 40..n - 20].iter().sum::<f64>() / 20.0;
        (now - before).abs() < 0.01 * before.abs().max(f64::MIN_POSITIVE)
    };
    (
        z,
        BurnInDiagnostics {
            discordant_trace: trace,
            stabilized,
        },
    )
}

/// Draws `γ_i ~ N(0, Γ)`, `ε_i ~ N(0, σ² I)` per site.
pub fn sample_curves<R: Rng + ?Sized>(
    labels: &LabelField,
    geometry: &[SiteGeometry],
    spec: &SimSpec,
    rng: &mut R,
) -> Result<Dataset> {
    let s = evaluate_basis(&spec.basis, &spec.times)?.values;
    let q = spec.basis.dimension();
    let l = psd_factor(&spec.gamma)?;
    let alpha = spec.alpha();
    let sd = spec.sigma2.sqrt();
    let curves = geometry
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let u = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
            let coef = alpha.row(labels.get(i)).transpose() + &l * u;
            let mut y = &s * coef;
            for v in y.iter_mut() {
                *v += sd * rng.sample::<f64, _>(StandardNormal);
            }
            AnnualCurve {
                site_id: g.site_id.clone(),
                times: spec.times.clone(),
                values: y.iter().copied().collect(),
                years_used: 1,
            }
        })
        .collect();
    Dataset::new(curves, geometry.to_vec())
}

pub fn simulate(spec: &SimSpec) -> Result<Simulation> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let geometry = sample_geometry(spec, &mut rng);
    let graph = spec.graph.build(&geometry)?;
    let (labels, diagnostics) = sample_labels(spec, &graph, &mut rng);
    let dataset = sample_curves(&labels, &geometry, spec, &mut rng)?;
    Ok(Simulation {
        dataset,
        graph,
        labels,
        alpha: spec.alpha(),
        diagnostics,
    })
}

/// Writes daily-grid curves as observations dated within `year` (a
/// non-leap year), so they can go through ingestion. Values must be
/// non-negative.
pub fn to_observations(dataset: &Dataset, year: i32) -> Result<Vec<RawObservation>> {
    if NaiveDate::from_ymd_opt(year, 2, 29).is_some() {
        return Err(Error::Config(format!("{year} is a leap year")));
    }
    let grid = daily_grid();
    let days: Vec<NaiveDate> = NaiveDate::from_ymd_opt(year, 1, 1)
        .expect("valid year")
        .iter_days()
        .take_while(|d| d.year() == year)
        .collect();
    debug_assert!(days.iter().all(|d| day_of_year(*d).is_some()));
    let mut out = Vec::with_capacity(dataset.len() * grid.len());
    for c in &dataset.curves {
        if c.times != grid {
            return Err(Error::Validation(format!(
                "site {}: only daily-grid curves can be written as observations",
                c.site_id
            )));
        }
        if let Some(v) = c.values.iter().find(|v| **v < 0.0) {
            return Err(Error::Validation(format!(
                "site {}: negative simulated value {v}",
                c.site_id
            )));
        }
        out.extend(days.iter().zip(&c.values).map(|(d, v)| RawObservation {
            site_id: c.site_id.clone(),
            date: *d,
            value: Some(*v),
        }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SimSpec {
        SimSpec {
            n_sites: 60,
            seed,
            burn_in: 30,
            ..SimSpec::default()
        }
    }

    #[test]
    fn default_spec_is_well_separated() {
        let spec = SimSpec::default();
        let gap = spec.min_mean_gap().unwrap();
        let noise = spec.noise_scale().unwrap();
        assert!(gap >= 5.0 * noise, "gap {gap} noise {noise}");
    }

    #[test]
    fn zero_noise_gives_exact_means() {
        let spec = SimSpec {
            gamma: DMatrix::zeros(12, 12),
            sigma2: 0.0,
            ..small_spec(1)
        };
        let sim = simulate(&spec).unwrap();
        let s = evaluate_basis(&spec.basis, &spec.times).unwrap().values;
        for (i, c) in sim.dataset.curves.iter().enumerate() {
            let want = &s * spec.alpha().row(sim.labels.get(i)).transpose();
            for (a, b) in c.values.iter().zip(want.iter()) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn seeds_control_output() {
        let a = simulate(&small_spec(3)).unwrap();
        let b = simulate(&small_spec(3)).unwrap();
        let c = simulate(&small_spec(4)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn zero_sites_rejected() {
        let spec = SimSpec {
            n_sites: 0,
            ..SimSpec::default()
        };
        assert!(matches!(simulate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn observations_cover_one_year() {
        let sim = simulate(&small_spec(5)).unwrap();
        let obs = to_observations(&sim.dataset, 2001).unwrap();
        assert_eq!(obs.len(), 60 * 365);
        assert!(to_observations(&sim.dataset, 2000).is_err());
    }
}
