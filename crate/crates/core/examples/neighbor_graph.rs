//! Build the spatial neighbor graph: k nearest neighbors by great-circle
//! distance, then drop edges that climb more than 1000 m.

use spatial_fclust::curves::SiteGeometry;
use spatial_fclust::graph::{
    apply_elevation_cutoff, covariate_weights, haversine_distance, knn_graph, GraphConfig,
    WeightScheme,
};

fn main() -> spatial_fclust::Result<()> {
    let sites = vec![
        SiteGeometry::new("beijing", 39.93, 116.28, 55.0),
        SiteGeometry::new("tianjin", 39.08, 117.07, 2.5),
        SiteGeometry::new("zhangjiakou", 40.78, 114.88, 724.0),
        SiteGeometry::new("datong", 40.10, 113.33, 1067.0),
        SiteGeometry::new("wutaishan", 38.95, 113.52, 2208.0),
        SiteGeometry::new("shijiazhuang", 38.03, 114.42, 81.0),
        SiteGeometry::new("baoding", 38.85, 115.57, 17.0),
    ];
    println!(
        "beijing to tianjin: {:.1} km",
        haversine_distance(&sites[0], &sites[1])
    );

    let knn = knn_graph(&sites, 3)?;
    let cut = apply_elevation_cutoff(&knn, &sites, 1000.0);
    println!(
        "kNN edges: {}, after the elevation rule: {}",
        knn.edge_count(),
        cut.edge_count()
    );
    for (i, j, _) in knn.edges() {
        if cut.weight(i, j).is_none() {
            let climb = (sites[i].elevation - sites[j].elevation).abs();
            println!(
                "  removed {} - {} ({climb:.0} m)",
                sites[i].site_id, sites[j].site_id
            );
        }
    }

    let smooth = covariate_weights(&knn, &sites, WeightScheme::ExpDecay { h_m: 1000.0 })?;
    for &(j, w) in smooth.neighbors(0) {
        println!("  beijing - {}: weight {w:.3}", sites[j].site_id);
    }

    // the pipeline default does the same in one call
    let g = GraphConfig::default().build(&sites)?;
    println!("default graph: {} edges", g.edge_count());
    Ok(())
}
