//! Command-line front end: `ingest`, `fit`, `simulate`, `score`.
//!
//! Configuration is a flat `key = value` file; every key can be overridden
//! with `--set key=value` (plus the shorthand flags `--seed`, `--clusters`,
//! `--out-dir`). Unknown keys are rejected. Every output file starts with a
//! comment carrying the SHA-256 of the effective configuration and the seed.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::basis::BasisSpec;
use crate::basis::OrthoTransform;
use crate::curves::{
    aggregate_all, filter_complete_sites, ingest_records, missing_summary, read_curves,
    read_geometry, read_observations, write_curves, write_geometry, write_observations, Dataset,
};
use crate::error::{Error, Result};
use crate::fit::{select_clusters, FitConfig, FitResult};
use crate::graph::{GraphConfig, WeightSchemeKind};
use crate::metrics::{adjusted_rand_index, confusion};
use crate::model::{write_snapshot, ClusterParams, CovParams, FunctionalDesign, ModelParams};
use crate::mrf::{MrfParams, ScanOrder};
use crate::simulate::{simulate, to_observations, SimSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BasisKind {
    BSpline,
    Fourier,
}

/// Every configurable key, with defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    pub observations: Option<PathBuf>,
    pub geometry: Option<PathBuf>,
    pub curves: Option<PathBuf>,

    pub min_complete_years: u32,
    pub max_missing_days_per_year: u32,
    pub year_start: i32,
    pub year_end: i32,

    pub basis_kind: BasisKind,
    pub basis_q: usize,
    pub basis_order: usize,
    pub basis_knots: Option<Vec<f64>>,
    pub lattice_size: usize,

    pub graph: GraphConfig,
    pub export_edges: bool,

    pub theta_init: f64,
    pub theta_bounds: (f64, f64),
    pub fixed_theta: Option<f64>,
    pub scan_order: ScanOrder,

    pub clusters: Vec<usize>,
    pub max_iter: usize,
    pub icm_sweeps_per_iter: usize,
    pub tol: f64,
    pub restarts: usize,
    pub fix_gamma_zero: bool,

    pub sim_n_sites: usize,
    pub sim_clusters: usize,
    pub sim_theta: f64,
    pub sim_sigma2: f64,
    pub sim_gamma_scale: f64,
    pub sim_level: f64,
    pub sim_amplitude: f64,
    pub sim_burn_in: usize,
    pub sim_lat_range: (f64, f64),
    pub sim_lon_range: (f64, f64),
    pub sim_elevation_range: (f64, f64),
    pub sim_year: i32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fit = FitConfig::default();
        let sim = SimSpec::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            observations: None,
            geometry: None,
            curves: None,
            min_complete_years: 50,
            max_missing_days_per_year: 0,
            year_start: 1963,
            year_end: 2012,
            basis_kind: BasisKind::BSpline,
            basis_q: crate::basis::DEFAULT_Q,
            basis_order: crate::basis::DEFAULT_ORDER,
            basis_knots: None,
            lattice_size: fit.lattice_size,
            graph: GraphConfig::default(),
            export_edges: false,
            theta_init: fit.theta_init,
            theta_bounds: fit.theta_bounds,
            fixed_theta: None,
            scan_order: ScanOrder::Systematic,
            clusters: vec![fit.n_clusters],
            max_iter: fit.max_iter,
            icm_sweeps_per_iter: fit.icm_sweeps_per_iter,
            tol: fit.tol,
            restarts: fit.restarts,
            fix_gamma_zero: false,
            sim_n_sites: sim.n_sites,
            sim_clusters: sim.n_clusters,
            sim_theta: sim.theta,
            sim_sigma2: sim.sigma2,
            sim_gamma_scale: 0.25,
            sim_level: sim.level,
            sim_amplitude: sim.amplitude,
            sim_burn_in: sim.burn_in,
            sim_lat_range: sim.lat_range,
            sim_lon_range: sim.lon_range,
            sim_elevation_range: sim.elevation_range,
            sim_year: 2001,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    match v.to_ascii_lowercase().as_str() {
        "inf" | "infinity" | "none" => Ok(f64::INFINITY),
        _ => parse_num(key, v),
    }
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    match parts[..] {
        [a, b] => Ok((parse_num(key, a)?, parse_num(key, b)?)),
        _ => Err(Error::Config(format!(
            "{key}: expected two comma-separated numbers"
        ))),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {v:?}"
        ))),
    }
}

fn fmt_pair(p: (f64, f64)) -> String {
    format!("{},{}", p.0, p.1)
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "out_dir",
        "input.observations",
        "input.geometry",
        "input.curves",
        "ingest.min_complete_years",
        "ingest.max_missing_days_per_year",
        "ingest.year_start",
        "ingest.year_end",
        "basis.kind",
        "basis.q",
        "basis.order",
        "basis.knots",
        "basis.lattice_size",
        "graph.k",
        "graph.elevation_cutoff_m",
        "graph.weight_scheme",
        "graph.exp_decay_h_m",
        "graph.export_edges",
        "mrf.theta_init",
        "mrf.theta_bounds",
        "mrf.fixed_theta",
        "mrf.scan_order",
        "fit.clusters",
        "fit.max_iter",
        "fit.icm_sweeps_per_iter",
        "fit.tol",
        "fit.restarts",
        "fit.fix_gamma_zero",
        "sim.n_sites",
        "sim.clusters",
        "sim.theta",
        "sim.sigma2",
        "sim.gamma_scale",
        "sim.level",
        "sim.amplitude",
        "sim.burn_in",
        "sim.lat_range",
        "sim.lon_range",
        "sim.elevation_range",
        "sim.year",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let path = || (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "input.observations" => self.observations = path(),
            "input.geometry" => self.geometry = path(),
            "input.curves" => self.curves = path(),
            "ingest.min_complete_years" => self.min_complete_years = parse_num(key, v)?,
            "ingest.max_missing_days_per_year" => {
                self.max_missing_days_per_year = parse_num(key, v)?
            }
            "ingest.year_start" => self.year_start = parse_num(key, v)?,
            "ingest.year_end" => self.year_end = parse_num(key, v)?,
            "basis.kind" => {
                self.basis_kind = match v {
                    "bspline" => BasisKind::BSpline,
                    "fourier" => BasisKind::Fourier,
                    _ => return Err(Error::Config(format!("basis.kind: unknown kind {v:?}"))),
                }
            }
            "basis.q" => self.basis_q = parse_num(key, v)?,
            "basis.order" => self.basis_order = parse_num(key, v)?,
            "basis.knots" => {
                self.basis_knots = if v.is_empty() || v == "uniform" {
                    None
                } else {
                    Some(
                        v.split(',')
                            .map(|k| parse_num(key, k.trim()))
                            .collect::<Result<_>>()?,
                    )
                }
            }
            "basis.lattice_size" => self.lattice_size = parse_num(key, v)?,
            "graph.k" => self.graph.k = parse_num(key, v)?,
            "graph.elevation_cutoff_m" => self.graph.elevation_cutoff_m = parse_f64(key, v)?,
            "graph.weight_scheme" => {
                self.graph.weight_scheme = match v {
                    "binary" | "binary_cutoff" => WeightSchemeKind::Binary,
                    "exp_decay" => WeightSchemeKind::ExpDecay,
                    _ => {
                        return Err(Error::Config(format!(
                            "graph.weight_scheme: unknown scheme {v:?}"
                        )))
                    }
                }
            }
            "graph.exp_decay_h_m" => self.graph.exp_decay_h_m = parse_num(key, v)?,
            "graph.export_edges" => self.export_edges = parse_bool(key, v)?,
            "mrf.theta_init" => self.theta_init = parse_num(key, v)?,
            "mrf.theta_bounds" => self.theta_bounds = parse_pair(key, v)?,
            "mrf.fixed_theta" => {
                self.fixed_theta = if v.is_empty() || v == "none" {
                    None
                } else {
                    Some(parse_num(key, v)?)
                }
            }
            "mrf.scan_order" => {
                self.scan_order = match v {
                    "systematic" => ScanOrder::Systematic,
                    "random" => ScanOrder::Random,
                    _ => {
                        return Err(Error::Config(format!(
                            "mrf.scan_order: unknown order {v:?}"
                        )))
                    }
                }
            }
            "fit.clusters" => {
                self.clusters = v
                    .split(',')
                    .map(|c| parse_num(key, c.trim()))
                    .collect::<Result<_>>()?
            }
            "fit.max_iter" => self.max_iter = parse_num(key, v)?,
            "fit.icm_sweeps_per_iter" => self.icm_sweeps_per_iter = parse_num(key, v)?,
            "fit.tol" => self.tol = parse_num(key, v)?,
            "fit.restarts" => self.restarts = parse_num(key, v)?,
            "fit.fix_gamma_zero" => self.fix_gamma_zero = parse_bool(key, v)?,
            "sim.n_sites" => self.sim_n_sites = parse_num(key, v)?,
            "sim.clusters" => self.sim_clusters = parse_num(key, v)?,
            "sim.theta" => self.sim_theta = parse_num(key, v)?,
            "sim.sigma2" => self.sim_sigma2 = parse_num(key, v)?,
            "sim.gamma_scale" => self.sim_gamma_scale = parse_num(key, v)?,
            "sim.level" => self.sim_level = parse_num(key, v)?,
            "sim.amplitude" => self.sim_amplitude = parse_num(key, v)?,
            "sim.burn_in" => self.sim_burn_in = parse_num(key, v)?,
            "sim.lat_range" => self.sim_lat_range = parse_pair(key, v)?,
            "sim.lon_range" => self.sim_lon_range = parse_pair(key, v)?,
            "sim.elevation_range" => self.sim_elevation_range = parse_pair(key, v)?,
            "sim.year" => self.sim_year = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or(String::new(), |p| p.display().to_string())
        };
        Some(match key {
            "seed" => self.seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "input.observations" => path(&self.observations),
            "input.geometry" => path(&self.geometry),
            "input.curves" => path(&self.curves),
            "ingest.min_complete_years" => self.min_complete_years.to_string(),
            "ingest.max_missing_days_per_year" => self.max_missing_days_per_year.to_string(),
            "ingest.year_start" => self.year_start.to_string(),
            "ingest.year_end" => self.year_end.to_string(),
            "basis.kind" => match self.basis_kind {
                BasisKind::BSpline => "bspline".into(),
                BasisKind::Fourier => "fourier".into(),
            },
            "basis.q" => self.basis_q.to_string(),
            "basis.order" => self.basis_order.to_string(),
            "basis.knots" => match &self.basis_knots {
                None => "uniform".into(),
                Some(k) => k
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            },
            "basis.lattice_size" => self.lattice_size.to_string(),
            "graph.k" => self.graph.k.to_string(),
            "graph.elevation_cutoff_m" => self.graph.elevation_cutoff_m.to_string(),
            "graph.weight_scheme" => match self.graph.weight_scheme {
                WeightSchemeKind::Binary => "binary".into(),
                WeightSchemeKind::ExpDecay => "exp_decay".into(),
            },
            "graph.exp_decay_h_m" => self.graph.exp_decay_h_m.to_string(),
            "graph.export_edges" => self.export_edges.to_string(),
            "mrf.theta_init" => self.theta_init.to_string(),
            "mrf.theta_bounds" => fmt_pair(self.theta_bounds),
            "mrf.fixed_theta" => self.fixed_theta.map_or("none".into(), |t| t.to_string()),
            "mrf.scan_order" => match self.scan_order {
                ScanOrder::Systematic => "systematic".into(),
                ScanOrder::Random => "random".into(),
            },
            "fit.clusters" => self
                .clusters
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "fit.max_iter" => self.max_iter.to_string(),
            "fit.icm_sweeps_per_iter" => self.icm_sweeps_per_iter.to_string(),
            "fit.tol" => self.tol.to_string(),
            "fit.restarts" => self.restarts.to_string(),
            "fit.fix_gamma_zero" => self.fix_gamma_zero.to_string(),
            "sim.n_sites" => self.sim_n_sites.to_string(),
            "sim.clusters" => self.sim_clusters.to_string(),
            "sim.theta" => self.sim_theta.to_string(),
            "sim.sigma2" => self.sim_sigma2.to_string(),
            "sim.gamma_scale" => self.sim_gamma_scale.to_string(),
            "sim.level" => self.sim_level.to_string(),
            "sim.amplitude" => self.sim_amplitude.to_string(),
            "sim.burn_in" => self.sim_burn_in.to_string(),
            "sim.lat_range" => fmt_pair(self.sim_lat_range),
            "sim.lon_range" => fmt_pair(self.sim_lon_range),
            "sim.elevation_range" => fmt_pair(self.sim_elevation_range),
            "sim.year" => self.sim_year.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, source_name: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                source_name: source_name.to_string(),
                line: n as u64 + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                source_name: source_name.to_string(),
                line: n as u64 + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// All keys in a fixed order; this is what the provenance hash covers.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("known key"));
        }
        s
    }

    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn provenance(&self, command: &str) -> String {
        format!(
            "spatial-fclust {command}\nconfig_sha256 = {}\nseed = {}",
            self.config_hash(),
            self.seed
        )
    }

    pub fn basis_spec(&self) -> Result<BasisSpec> {
        match self.basis_kind {
            BasisKind::Fourier => BasisSpec::fourier(self.basis_q),
            BasisKind::BSpline => match &self.basis_knots {
                None => BasisSpec::bspline_uniform(self.basis_q, self.basis_order),
                Some(k) => {
                    let spec = BasisSpec::bspline(self.basis_order, k.clone())?;
                    if spec.dimension() != self.basis_q {
                        return Err(Error::Config(format!(
                            "basis.q = {} but order + knots gives {}",
                            self.basis_q,
                            spec.dimension()
                        )));
                    }
                    Ok(spec)
                }
            },
        }
    }

    pub fn fit_config(&self, n_clusters: usize) -> Result<FitConfig> {
        let cfg = FitConfig {
            n_clusters,
            max_iter: self.max_iter,
            icm_sweeps_per_iter: self.icm_sweeps_per_iter,
            tol: self.tol,
            seed: self.seed,
            restarts: self.restarts,
            basis: self.basis_spec()?,
            lattice_size: self.lattice_size,
            theta_init: self.theta_init,
            theta_bounds: self.theta_bounds,
            fixed_theta: self.fixed_theta,
            fix_gamma_zero: self.fix_gamma_zero,
            scan_order: self.scan_order,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sim_spec(&self) -> Result<SimSpec> {
        let basis = self.basis_spec()?;
        let q = basis.dimension();
        let spec = SimSpec {
            n_sites: self.sim_n_sites,
            geometry: None,
            lat_range: self.sim_lat_range,
            lon_range: self.sim_lon_range,
            elevation_range: self.sim_elevation_range,
            graph: self.graph.clone(),
            theta: self.sim_theta,
            n_clusters: self.sim_clusters,
            alpha: None,
            level: self.sim_level,
            amplitude: self.sim_amplitude,
            gamma: DMatrix::identity(q, q) * self.sim_gamma_scale,
            sigma2: self.sim_sigma2,
            basis,
            times: crate::curves::daily_grid(),
            burn_in: self.sim_burn_in,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "spatial-fclust",
    version,
    about = "Cluster spatial functional data with a Markov random field prior"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Cluster count or comma-separated candidate list.
    #[arg(long, global = true)]
    pub clusters: Option<String>,
    #[arg(long = "out-dir", global = true)]
    pub out_dir: Option<PathBuf>,
    /// Override any configuration key: `--set graph.k=6`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter and aggregate daily observations into mean annual curves.
    Ingest {
        #[arg(long)]
        observations: Option<PathBuf>,
        #[arg(long)]
        geometry: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fit the model (or select the cluster count) and write assignments.
    Fit {
        #[arg(long)]
        curves: Option<PathBuf>,
        #[arg(long)]
        geometry: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Generate a synthetic dataset with ground truth.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Compare assignments against a reference labeling.
    Score {
        #[arg(long)]
        assignments: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn resolve_config(common: &CommonArgs, clusters_key: &str) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(c) = &common.clusters {
        cfg.set(clusters_key, c)?;
    }
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.clone();
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::Config(format!("missing input path ({key})")))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub sites_in: usize,
    pub retained: Vec<String>,
    pub dropped: Vec<String>,
    pub missing_percent: f64,
    pub text: String,
}

/// Reads observations and geometry, filters, aggregates, and writes
/// `curves.csv`, `geometry.csv` and `ingest_report.txt` to the output
/// directory.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestReport> {
    let obs_path = required(&cfg.observations, "input.observations")?;
    let geom_path = required(&cfg.geometry, "input.geometry")?;
    let name = obs_path.display().to_string();
    let records = ingest_records(read_observations(open(obs_path)?, &name)?)?;
    let geometry = read_geometry(open(geom_path)?, &geom_path.display().to_string())?;
    let missing = missing_summary(&records);
    let sites_in = records.len();
    let outcome = filter_complete_sites(
        records,
        cfg.min_complete_years,
        cfg.max_missing_days_per_year,
    );
    let curves = aggregate_all(&outcome.records, (cfg.year_start, cfg.year_end))?;
    let dataset = Dataset::new(curves, geometry)?;

    let mut text = String::new();
    let _ = writeln!(text, "sites in: {sites_in}");
    let _ = writeln!(
        text,
        "sites retained: {} (>= {} complete years, <= {} missing days per year)",
        outcome.retained.len(),
        cfg.min_complete_years,
        cfg.max_missing_days_per_year
    );
    let _ = writeln!(text, "sites dropped: {}", outcome.dropped.len());
    for id in &outcome.dropped {
        let _ = writeln!(text, "  dropped {id}");
    }
    let _ = writeln!(text, "missing days: {:.2}%", missing.percent());
    if dataset.is_empty() {
        let _ = writeln!(
            text,
            "no site met the completeness threshold; curve file is empty"
        );
    }

    ensure_dir(&cfg.out_dir)?;
    let prov = cfg.provenance("ingest");
    write_curves(
        create(&cfg.out_dir.join("curves.csv"))?,
        &dataset.curves,
        &prov,
    )?;
    write_geometry(
        create(&cfg.out_dir.join("geometry.csv"))?,
        &dataset.geometry,
        &prov,
    )?;
    let mut f = create(&cfg.out_dir.join("ingest_report.txt"))?;
    let report_path = cfg.out_dir.join("ingest_report.txt");
    (|| -> std::io::Result<()> {
        crate::curves::write_comment(&mut f, &prov)?;
        f.write_all(text.as_bytes())
    })()
    .map_err(|e| Error::io(report_path, e))?;
    Ok(IngestReport {
        sites_in,
        retained: outcome.retained,
        dropped: outcome.dropped,
        missing_percent: missing.percent(),
        text,
    })
}

#[derive(Debug)]
pub struct FitOutcome {
    pub best: FitResult,
    pub selected_clusters: usize,
    /// `(C, pseudo-BIC)` for every candidate that fitted.
    pub candidates: Vec<(usize, f64)>,
}

/// Builds the graph, fits (selecting among `fit.clusters` when several are
/// given) and writes `assignments.csv`, `clusters.geojson`, `params.txt`,
/// `trace.csv` and `selection.csv`.
pub fn cmd_fit(cfg: &RunConfig) -> Result<FitOutcome> {
    let curves_path = required(&cfg.curves, "input.curves")?;
    let geom_path = required(&cfg.geometry, "input.geometry")?;
    let curves = read_curves(open(curves_path)?, &curves_path.display().to_string())?;
    let geometry = read_geometry(open(geom_path)?, &geom_path.display().to_string())?;
    let dataset = Dataset::new(curves, geometry)?;
    if dataset.is_empty() {
        return Err(Error::Validation("no curves to fit".into()));
    }
    let graph = cfg.graph.build(&dataset.geometry)?;
    let base = cfg.fit_config(cfg.clusters.first().copied().unwrap_or(1))?;
    let design = FunctionalDesign::new(&dataset, &base.basis, base.lattice_size)?;
    let selection = select_clusters(&design, &graph, &base, &cfg.clusters)?;

    let prov = cfg.provenance("fit");
    ensure_dir(&cfg.out_dir)?;
    let mut candidates = Vec::new();
    let mut sel = String::from("clusters,pseudo_bic,objective,converged,iterations\n");
    for (c, res) in &selection.fits {
        match res {
            Ok(r) => {
                candidates.push((*c, r.pseudo_bic));
                let _ = writeln!(
                    sel,
                    "{c},{},{},{},{}",
                    r.pseudo_bic, r.objective, r.converged, r.iterations
                );
            }
            Err(e) => {
                let _ = writeln!(sel, "{c},,,error: {},", e.to_string().replace(',', ";"));
            }
        }
    }
    write_text(&cfg.out_dir.join("selection.csv"), &prov, &sel)?;

    let best = selection.best_fit().clone();
    write_assignments(&cfg.out_dir.join("assignments.csv"), &prov, &dataset, &best)?;
    write_geojson(&cfg.out_dir.join("clusters.geojson"), cfg, &dataset, &best)?;
    write_snapshot(
        create(&cfg.out_dir.join("params.txt"))?,
        &best.params,
        &prov,
    )?;
    let mut trace = String::from("iteration,objective\n");
    for (i, j) in best.objective_trace.iter().enumerate() {
        let _ = writeln!(trace, "{},{}", i + 1, j);
    }
    write_text(&cfg.out_dir.join("trace.csv"), &prov, &trace)?;
    if cfg.export_edges {
        graph.write_edge_list(
            create(&cfg.out_dir.join("graph_edges.csv"))?,
            &dataset.geometry,
            &prov,
        )?;
    }
    Ok(FitOutcome {
        best,
        selected_clusters: selection.best,
        candidates,
    })
}

fn write_text(path: &Path, prov: &str, body: &str) -> Result<()> {
    let mut f = std::io::BufWriter::new(create(path)?);
    (|| -> std::io::Result<()> {
        crate::curves::write_comment(&mut f, prov)?;
        f.write_all(body.as_bytes())?;
        f.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

fn write_assignments(path: &Path, prov: &str, dataset: &Dataset, fit: &FitResult) -> Result<()> {
    let c = fit.labels.n_clusters();
    let mut body = String::from("site_id,cluster");
    for k in 1..=c {
        let _ = write!(body, ",posterior_{k}");
    }
    body.push('\n');
    for (i, id) in dataset.site_ids().enumerate() {
        let _ = write!(body, "{id},{}", fit.labels.get(i) + 1);
        for k in 0..c {
            let _ = write!(body, ",{:?}", fit.conditional_posteriors[(i, k)]);
        }
        body.push('\n');
    }
    write_text(path, prov, &body)
}

fn write_geojson(path: &Path, cfg: &RunConfig, dataset: &Dataset, fit: &FitResult) -> Result<()> {
    let features: Vec<serde_json::Value> = dataset
        .geometry
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let post_max = fit
                .conditional_posteriors
                .row(i)
                .iter()
                .fold(0.0f64, |a, &b| a.max(b));
            serde_json::json!({
                "type": "Feature",
                "geometry": { "type": "Point", "coordinates": [g.longitude, g.latitude] },
                "properties": {
                    "site_id": g.site_id,
                    "cluster": fit.labels.get(i) + 1,
                    "posterior_max": post_max,
                    "elev_m": g.elevation,
                },
            })
        })
        .collect();
    let doc = serde_json::json!({
        "type": "FeatureCollection",
        "provenance": { "config_sha256": cfg.config_hash(), "seed": cfg.seed },
        "features": features,
    });
    let text = serde_json::to_string_pretty(&doc).expect("json serialization");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Simulates and writes `observations.csv`, `geometry.csv`, `curves.csv`,
/// `truth_labels.csv`, `truth_params.txt` and `run.conf` (a configuration
/// that ingests and fits the simulated files as-is).
pub fn cmd_simulate(cfg: &RunConfig) -> Result<crate::simulate::Simulation> {
    let spec = cfg.sim_spec()?;
    let sim = simulate(&spec)?;
    let prov = cfg.provenance("simulate");
    let dir = &cfg.out_dir;
    ensure_dir(dir)?;
    write_geometry(
        create(&dir.join("geometry.csv"))?,
        &sim.dataset.geometry,
        &prov,
    )?;
    write_curves(create(&dir.join("curves.csv"))?, &sim.dataset.curves, &prov)?;
    match to_observations(&sim.dataset, cfg.sim_year) {
        Ok(obs) => write_observations(create(&dir.join("observations.csv"))?, &obs, &prov)?,
        Err(e) => eprintln!("observations.csv not written: {e}"),
    }
    let mut truth = String::from("site_id,cluster\n");
    for (i, id) in sim.dataset.site_ids().enumerate() {
        let _ = writeln!(truth, "{id},{}", sim.labels.get(i) + 1);
    }
    write_text(&dir.join("truth_labels.csv"), &prov, &truth)?;
    let q = spec.basis.dimension();
    let truth_params = ModelParams {
        clusters: ClusterParams {
            alpha: sim.alpha.clone(),
        },
        cov: CovParams {
            gamma: spec.gamma.clone(),
            sigma2: spec.sigma2,
        },
        mrf: MrfParams {
            theta: spec.theta,
            n_clusters: spec.n_clusters,
        },
        basis: spec.basis.clone(),
        transform: OrthoTransform::identity(q),
    };
    write_snapshot(create(&dir.join("truth_params.txt"))?, &truth_params, &prov)?;

    let mut run = cfg.clone();
    run.observations = Some(dir.join("observations.csv"));
    run.geometry = Some(dir.join("geometry.csv"));
    run.curves = Some(dir.join("curves.csv"));
    run.min_complete_years = 1;
    run.year_start = cfg.sim_year;
    run.year_end = cfg.sim_year;
    run.clusters = vec![spec.n_clusters];
    run.out_dir = dir.join("run");
    write_text(&dir.join("run.conf"), &prov, &run.to_text())?;
    Ok(sim)
}

fn read_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    let name = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(open(path)?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            source_name: name.clone(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() < 2 {
            return Err(Error::Parse {
                source_name: name.clone(),
                line,
                message: "expected site_id,cluster".into(),
            });
        }
        let k: usize = rec[1].parse().map_err(|_| Error::Parse {
            source_name: name.clone(),
            line,
            message: format!("invalid cluster {:?}", &rec[1]),
        })?;
        out.push((rec[0].to_string(), k));
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub ari: f64,
    pub text: String,
}

pub fn cmd_score(assignments: &Path, truth: &Path) -> Result<ScoreReport> {
    let a = read_labels(assignments)?;
    let t = read_labels(truth)?;
    let ids_a: Vec<&str> = a.iter().map(|p| p.0.as_str()).collect();
    let ids_t: Vec<&str> = t.iter().map(|p| p.0.as_str()).collect();
    if ids_a != ids_t {
        let only_a: Vec<&str> = ids_a
            .iter()
            .filter(|i| !ids_t.contains(i))
            .copied()
            .collect();
        let only_t: Vec<&str> = ids_t
            .iter()
            .filter(|i| !ids_a.contains(i))
            .copied()
            .collect();
        return Err(Error::Validation(format!(
            "site ids differ; only in assignments: [{}]; only in truth: [{}]",
            only_a.join(", "),
            only_t.join(", ")
        )));
    }
    let la: Vec<usize> = a.iter().map(|p| p.1).collect();
    let lt: Vec<usize> = t.iter().map(|p| p.1).collect();
    let ari = adjusted_rand_index(&la, &lt)?;
    let table = confusion(&la, &lt)?;
    let mut text = format!(
        "sites: {}\nadjusted_rand_index: {ari}\n\nconfusion (rows: assigned, columns: truth)\n",
        la.len()
    );
    let _ = write!(text, "assigned");
    for c in &table.cols {
        let _ = write!(text, ",{c}");
    }
    text.push('\n');
    for r in &table.rows {
        let _ = write!(text, "{r}");
        for c in &table.cols {
            let _ = write!(
                text,
                ",{}",
                table.counts.get(&(*r, *c)).copied().unwrap_or(0)
            );
        }
        text.push('\n');
    }
    Ok(ScoreReport { ari, text })
}

fn exit_code_for(e: &Error) -> i32 {
    let _ = e;
    EXIT_VALIDATION
}

/// Runs a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Ingest {
            observations,
            geometry,
            common,
        } => resolve_config(&common, "fit.clusters").and_then(|mut cfg| {
            if observations.is_some() {
                cfg.observations = observations;
            }
            if geometry.is_some() {
                cfg.geometry = geometry;
            }
            let report = cmd_ingest(&cfg)?;
            print!("{}", report.text);
            Ok(EXIT_OK)
        }),
        Command::Fit {
            curves,
            geometry,
            common,
        } => resolve_config(&common, "fit.clusters").and_then(|mut cfg| {
            if curves.is_some() {
                cfg.curves = curves;
            }
            if geometry.is_some() {
                cfg.geometry = geometry;
            }
            let out = cmd_fit(&cfg)?;
            if out.candidates.len() > 1 {
                for (c, b) in &out.candidates {
                    println!("C = {c}: pseudo-BIC {b}");
                }
            }
            println!("selected C = {}", out.selected_clusters);
            println!(
                "θ = {}, σ² = {}, J = {}, iterations = {}, converged = {}",
                out.best.params.mrf.theta,
                out.best.params.cov.sigma2,
                out.best.objective,
                out.best.iterations,
                out.best.converged
            );
            Ok(if out.best.converged {
                EXIT_OK
            } else {
                EXIT_NOT_CONVERGED
            })
        }),
        Command::Simulate { common } => resolve_config(&common, "sim.clusters").and_then(|cfg| {
            let sim = cmd_simulate(&cfg)?;
            println!(
                "simulated {} sites, {} clusters; files in {}",
                sim.dataset.len(),
                sim.alpha.nrows(),
                cfg.out_dir.display()
            );
            if !sim.diagnostics.stabilized {
                eprintln!("warning: discordant-edge fraction still moving after burn-in");
            }
            Ok(EXIT_OK)
        }),
        Command::Score {
            assignments,
            truth,
            common,
        } => resolve_config(&common, "fit.clusters").and_then(|cfg| {
            let report = cmd_score(&assignments, &truth)?;
            print!("{}", report.text);
            if common.out_dir.is_some() {
                ensure_dir(&cfg.out_dir)?;
                write_text(
                    &cfg.out_dir.join("score.txt"),
                    &cfg.provenance("score"),
                    &report.text,
                )?;
            }
            Ok(EXIT_OK)
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            }
        }
    }
}
