//! Choose the number of clusters by pseudo-BIC.

use spatial_fclust::fit::{select_clusters, FitConfig};
use spatial_fclust::model::FunctionalDesign;
use spatial_fclust::simulate::{simulate, SimSpec};

fn main() -> spatial_fclust::Result<()> {
    let spec = SimSpec {
        n_sites: 250,
        n_clusters: 3,
        seed: 9,
        ..SimSpec::default()
    };
    let sim = simulate(&spec)?;
    let config = FitConfig {
        restarts: 3,
        ..FitConfig::default()
    };
    let design = FunctionalDesign::new(&sim.dataset, &config.basis, config.lattice_size)?;
    let selection = select_clusters(&design, &sim.graph, &config, &[2, 3, 4, 5])?;
    for (c, res) in &selection.fits {
        match res {
            Ok(r) => println!(
                "C = {c}: J = {:.1}, pseudo-BIC = {:.1}",
                r.objective, r.pseudo_bic
            ),
            Err(e) => println!("C = {c}: failed ({e})"),
        }
    }
    println!(
        "selected C = {} (truth {})",
        selection.best, spec.n_clusters
    );
    Ok(())
}
