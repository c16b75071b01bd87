//! Spatial neighborhoods `∂i` and their geographic-covariate edge weights.

use std::io::Write;

use crate::curves::{write_comment, SiteGeometry};
use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const DEFAULT_K: usize = 5;
pub const DEFAULT_ELEVATION_CUTOFF_M: f64 = 1000.0;

/// Undirected weighted graph stored as sorted adjacency lists. Symmetric by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl NeighborGraph {
    /// Builds from an undirected edge list; duplicates keep the last weight.
    pub fn from_edges(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (a, b, w) in edges {
            if a >= n || b >= n {
                return Err(Error::Validation(format!(
                    "edge ({a}, {b}) out of range for {n} sites"
                )));
            }
            if a == b {
                return Err(Error::Validation(format!("self-loop at site {a}")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Validation(format!(
                    "edge ({a}, {b}) has invalid weight {w}"
                )));
            }
            adjacency[a].push((b, w));
            adjacency[b].push((a, w));
        }
        for list in &mut adjacency {
            list.sort_by_key(|&(j, _)| j);
            // keep the last inserted weight for each neighbor
            let mut dedup: Vec<(usize, f64)> = Vec::with_capacity(list.len());
            for &(j, w) in list.iter() {
                match dedup.last_mut() {
                    Some(last) if last.0 == j => last.1 = w,
                    _ => dedup.push((j, w)),
                }
            }
            *list = dedup;
        }
        Ok(Self { adjacency })
    }

    pub fn empty(n: usize) -> Self {
        Self {
            adjacency: vec![Vec::new(); n],
        }
    }

    pub fn n_sites(&self) -> usize {
        self.adjacency.len()
    }

    /// `(j, w_ij)` for `j ∈ ∂i`, ascending in `j`.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    /// Each undirected edge once, as `(i, j, w)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.adjacency.iter().enumerate().flat_map(|(i, list)| {
            list.iter()
                .filter(move |&&(j, _)| j > i)
                .map(move |&(j, w)| (i, j, w))
        })
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        self.adjacency[i]
            .binary_search_by_key(&j, |&(k, _)| k)
            .ok()
            .map(|p| self.adjacency[i][p].1)
    }

    pub fn is_symmetric(&self) -> bool {
        self.adjacency.iter().enumerate().all(|(i, list)| {
            list.iter()
                .all(|&(j, w)| j != i && self.weight(j, i) == Some(w))
        })
    }

    /// Copy with every weight multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            adjacency: self
                .adjacency
                .iter()
                .map(|l| l.iter().map(|&(j, w)| (j, w * c)).collect())
                .collect(),
        }
    }

    fn retain_edges(&self, mut keep: impl FnMut(usize, usize) -> bool) -> Self {
        Self {
            adjacency: self
                .adjacency
                .iter()
                .enumerate()
                .map(|(i, l)| l.iter().copied().filter(|&(j, _)| keep(i, j)).collect())
                .collect(),
        }
    }

    fn reweight(&self, mut weight: impl FnMut(usize, usize, f64) -> f64) -> Self {
        Self {
            adjacency: self
                .adjacency
                .iter()
                .enumerate()
                .map(|(i, l)| l.iter().map(|&(j, w)| (j, weight(i, j, w))).collect())
                .collect(),
        }
    }

    /// Writes `site_a,site_b,weight`, one row per undirected edge.
    pub fn write_edge_list<W: Write>(
        &self,
        writer: W,
        sites: &[SiteGeometry],
        header_comment: &str,
    ) -> Result<()> {
        let mut w = std::io::BufWriter::new(writer);
        let io = |e| Error::io("edge list", e);
        write_comment(&mut w, header_comment).map_err(io)?;
        writeln!(w, "site_a,site_b,weight").map_err(io)?;
        for (i, j, wt) in self.edges() {
            writeln!(w, "{},{},{}", sites[i].site_id, sites[j].site_id, wt).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Great-circle distance in kilometers.
pub fn haversine_distance(a: &SiteGeometry, b: &SiteGeometry) -> f64 {
    let (lat1, lat2) = (a.latitude.to_radians(), b.latitude.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.longitude - a.longitude).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Links each site to its `k` nearest sites, then symmetrizes by union.
/// Distance ties go to the smaller site id. `k >= n - 1` gives the complete
/// graph.
pub fn knn_graph(sites: &[SiteGeometry], k: usize) -> Result<NeighborGraph> {
    if k == 0 {
        return Err(Error::Config("graph.k must be >= 1".into()));
    }
    let n = sites.len();
    let mut ids: Vec<&str> = sites.iter().map(|s| s.site_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Validation(format!("duplicate site id {}", w[0])));
    }
    let k = k.min(n.saturating_sub(1));
    let mut edges = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        cand.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (haversine_distance(&sites[i], &sites[j]), j)),
        );
        cand.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then_with(|| sites[a.1].site_id.cmp(&sites[b.1].site_id))
        });
        edges.extend(cand.iter().take(k).map(|&(_, j)| (i, j, 1.0)));
    }
    NeighborGraph::from_edges(n, edges)
}

/// Drops every edge whose endpoints differ in elevation by more than
/// `threshold_m`. A difference of exactly `threshold_m` is kept.
pub fn apply_elevation_cutoff(
    g: &NeighborGraph,
    sites: &[SiteGeometry],
    threshold_m: f64,
) -> NeighborGraph {
    g.retain_edges(|i, j| (sites[i].elevation - sites[j].elevation).abs() <= threshold_m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightScheme {
    /// `w ∈ {0, 1}`: edges beyond the elevation threshold are removed.
    BinaryCutoff { threshold_m: f64 },
    /// `w_ij = exp(−|elev_i − elev_j| / h_m)`.
    ExpDecay { h_m: f64 },
}

pub fn covariate_weights(
    g: &NeighborGraph,
    sites: &[SiteGeometry],
    scheme: WeightScheme,
) -> Result<NeighborGraph> {
    match scheme {
        WeightScheme::BinaryCutoff { threshold_m } => {
            if threshold_m.is_nan() || threshold_m <= 0.0 {
                return Err(Error::Config(format!(
                    "elevation threshold must be positive, got {threshold_m}"
                )));
            }
            Ok(apply_elevation_cutoff(g, sites, threshold_m))
        }
        WeightScheme::ExpDecay { h_m } => {
            if !(h_m > 0.0) || !h_m.is_finite() {
                return Err(Error::Config(format!(
                    "exp_decay h must be positive, got {h_m}"
                )));
            }
            Ok(
                g.reweight(|i, j, _| {
                    (-(sites[i].elevation - sites[j].elevation).abs() / h_m).exp()
                }),
            )
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSchemeKind {
    Binary,
    ExpDecay,
}

/// How the fitting pipeline builds its graph from site geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphConfig {
    pub k: usize,
    /// `f64::INFINITY` disables the cutoff.
    pub elevation_cutoff_m: f64,
    pub weight_scheme: WeightSchemeKind,
    pub exp_decay_h_m: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            elevation_cutoff_m: DEFAULT_ELEVATION_CUTOFF_M,
            weight_scheme: WeightSchemeKind::Binary,
            exp_decay_h_m: 1000.0,
        }
    }
}

impl GraphConfig {
    /// kNN, then the elevation cutoff, then (optionally) smooth weights.
    pub fn build(&self, sites: &[SiteGeometry]) -> Result<NeighborGraph> {
        let mut g = knn_graph(sites, self.k)?;
        if self.elevation_cutoff_m.is_finite() {
            g = covariate_weights(
                &g,
                sites,
                WeightScheme::BinaryCutoff {
                    threshold_m: self.elevation_cutoff_m,
                },
            )?;
        }
        if self.weight_scheme == WeightSchemeKind::ExpDecay {
            g = covariate_weights(
                &g,
                sites,
                WeightScheme::ExpDecay {
                    h_m: self.exp_decay_h_m,
                },
            )?;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn site(id: &str, lat: f64, lon: f64, elev: f64) -> SiteGeometry {
        SiteGeometry::new(id, lat, lon, elev)
    }

    fn random_sites(n: usize, seed: u64) -> Vec<SiteGeometry> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                site(
                    &format!("s{i:03}"),
                    rng.random_range(20.0..40.0),
                    rng.random_range(100.0..120.0),
                    rng.random_range(0.0..3000.0),
                )
            })
            .collect()
    }

    #[test]
    fn haversine_identity_and_degree() {
        let a = site("a", 0.0, 0.0, 0.0);
        let b = site("b", 0.0, 1.0, 0.0);
        assert_eq!(haversine_distance(&a, &a), 0.0);
        // R * π / 180
        let want = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
        assert!((haversine_distance(&a, &b) - want).abs() < 1e-9);
        assert!((haversine_distance(&a, &b) - 111.195).abs() < 1e-3);
    }

    #[test]
    fn haversine_symmetric() {
        let s = random_sites(30, 1);
        for a in &s {
            for b in &s {
                assert_eq!(haversine_distance(a, b), haversine_distance(b, a));
            }
        }
    }

    #[test]
    fn collinear_middle_site_gets_both_neighbors() {
        let s = vec![
            site("a", 0.0, 0.0, 0.0),
            site("b", 0.0, 1.0, 0.0),
            site("c", 0.0, 2.0, 0.0),
        ];
        let g = knn_graph(&s, 1).unwrap();
        assert_eq!(g.degree(1), 2);
        assert_eq!(g.degree(0), 1);
        assert_eq!(g.degree(2), 1);
        assert!(g.is_symmetric());
    }

    #[test]
    fn knn_matches_brute_force() {
        let s = random_sites(10, 7);
        let k = 3;
        let g = knn_graph(&s, k).unwrap();
        let mut expected = vec![std::collections::BTreeSet::new(); s.len()];
        for i in 0..s.len() {
            let mut d: Vec<(f64, usize)> = (0..s.len())
                .filter(|&j| j != i)
                .map(|j| (haversine_distance(&s[i], &s[j]), j))
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for &(_, j) in &d[..k] {
                expected[i].insert(j);
                expected[j].insert(i);
            }
        }
        for i in 0..s.len() {
            let got: std::collections::BTreeSet<usize> =
                g.neighbors(i).iter().map(|p| p.0).collect();
            assert_eq!(got, expected[i]);
        }
    }

    #[test]
    fn saturated_k_is_complete() {
        let s = random_sites(6, 2);
        let g = knn_graph(&s, 10).unwrap();
        assert_eq!(g.edge_count(), 15);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let s = vec![
            site("a", 0.0, 0.0, 0.0),
            site("a", 0.0, 0.0, 0.0),
            site("b", 1.0, 0.0, 0.0),
        ];
        assert!(matches!(knn_graph(&s, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn distance_ties_broken_by_site_id() {
        let s = vec![
            site("m", 0.0, 0.0, 0.0),
            site("z", 0.0, 1.0, 0.0),
            site("b", 0.0, -1.0, 0.0),
            site("y", 0.0, 1.1, 0.0),
        ];
        let g = knn_graph(&s, 1).unwrap();
        // "m" picks "b" over "z"
        assert!(g.weight(0, 2).is_some());
        assert!(g.weight(0, 1).is_none());
    }

    #[test]
    fn elevation_rule_boundary() {
        let s = vec![
            site("a", 0.0, 0.0, 0.0),
            site("b", 0.0, 0.1, 1500.0),
            site("c", 0.0, 0.2, 999.0),
            site("d", 0.0, 0.3, 1000.0),
            site("e", 0.0, 0.4, 1000.000001),
        ];
        let g = NeighborGraph::from_edges(5, [(0, 1, 1.0), (0, 2, 1.0), (0, 3, 1.0), (0, 4, 1.0)])
            .unwrap();
        let cut = apply_elevation_cutoff(&g, &s, 1000.0);
        assert!(cut.weight(0, 1).is_none());
        assert!(cut.weight(0, 2).is_some());
        assert!(cut.weight(0, 3).is_some());
        assert!(cut.weight(0, 4).is_none());
        assert!(cut.is_symmetric());
    }

    #[test]
    fn infinite_threshold_is_noop() {
        let s = random_sites(20, 3);
        let g = knn_graph(&s, 4).unwrap();
        assert_eq!(apply_elevation_cutoff(&g, &s, f64::INFINITY), g);
    }

    #[test]
    fn cutoff_matches_edge_filter() {
        let s = random_sites(40, 4);
        let g = knn_graph(&s, 5).unwrap();
        let cut = apply_elevation_cutoff(&g, &s, 1000.0);
        let want: Vec<(usize, usize)> = g
            .edges()
            .filter(|&(i, j, _)| (s[i].elevation - s[j].elevation).abs() <= 1000.0)
            .map(|(i, j, _)| (i, j))
            .collect();
        let got: Vec<(usize, usize)> = cut.edges().map(|(i, j, _)| (i, j)).collect();
        assert_eq!(got, want);
        assert!(cut.edge_count() <= g.edge_count());
    }

    #[test]
    fn exp_decay_weights() {
        let s = vec![
            site("a", 0.0, 0.0, 200.0),
            site("b", 0.0, 0.1, 200.0),
            site("c", 0.0, 0.2, 1200.0),
        ];
        let g = NeighborGraph::from_edges(3, [(0, 1, 1.0), (0, 2, 1.0)]).unwrap();
        let w = covariate_weights(&g, &s, WeightScheme::ExpDecay { h_m: 1000.0 }).unwrap();
        assert_eq!(w.weight(0, 1), Some(1.0));
        assert!((w.weight(0, 2).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!((w.weight(0, 2).unwrap() - 0.3679).abs() < 1e-4);
        assert!(w.is_symmetric());
    }

    #[test]
    fn exp_decay_rejects_nonpositive_scale() {
        let g = NeighborGraph::empty(0);
        assert!(covariate_weights(&g, &[], WeightScheme::ExpDecay { h_m: 0.0 }).is_err());
    }

    #[test]
    fn binary_scheme_equals_cutoff() {
        let s = random_sites(30, 5);
        let g = knn_graph(&s, 5).unwrap();
        let a = covariate_weights(
            &g,
            &s,
            WeightScheme::BinaryCutoff {
                threshold_m: 1000.0,
            },
        )
        .unwrap();
        assert_eq!(a, apply_elevation_cutoff(&g, &s, 1000.0));
    }

    #[test]
    fn deterministic_construction() {
        let s = random_sites(50, 6);
        let cfg = GraphConfig::default();
        assert_eq!(cfg.build(&s).unwrap(), cfg.build(&s).unwrap());
    }

    #[test]
    fn edge_list_export() {
        let s = vec![site("a", 0.0, 0.0, 0.0), site("b", 0.0, 1.0, 0.0)];
        let g = knn_graph(&s, 1).unwrap();
        let mut buf = Vec::new();
        g.write_edge_list(&mut buf, &s, "x").unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "# x\nsite_a,site_b,weight\na,b,1\n"
        );
    }
}
