//! Simulate spatially clustered curves and fit the model end to end.

use spatial_fclust::fit::{fit, FitConfig};
use spatial_fclust::metrics::adjusted_rand_index;
use spatial_fclust::simulate::{simulate, SimSpec};

fn main() -> spatial_fclust::Result<()> {
    let spec = SimSpec {
        n_sites: 300,
        seed: 42,
        ..SimSpec::default()
    };
    let sim = simulate(&spec)?;
    println!(
        "{} sites, {} edges, true sizes {:?}",
        sim.dataset.len(),
        sim.graph.edge_count(),
        sim.labels.counts()
    );

    let config = FitConfig {
        n_clusters: 3,
        seed: 1,
        ..FitConfig::default()
    };
    let res = fit(&sim.dataset, &sim.graph, &config)?;
    println!(
        "converged {} after {} iterations (restart {}), J = {:.2}",
        res.converged, res.iterations, res.restart, res.objective
    );
    println!(
        "θ̂ = {:.3}, σ̂² = {:.3} (true {}, {})",
        res.params.mrf.theta, res.params.cov.sigma2, spec.theta, spec.sigma2
    );
    println!("fitted sizes {:?}", res.labels.counts());
    println!(
        "ARI against truth: {:.3}",
        adjusted_rand_index(res.labels.labels(), sim.labels.labels())?
    );
    Ok(())
}
