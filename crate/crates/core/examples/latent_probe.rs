//! PCA rendering of an embedding grid and a within-image similarity ranking.

use changekit::interchange::write_rgb_png;
use changekit::probe::{fit_pca, pca_rgb, semantic_query};
use changekit::synthetic::two_cluster_fixture;
use changekit::Time;

fn main() -> changekit::Result<()> {
    let s = two_cluster_fixture().session;
    let grid = s.grid(Time::T0);
    let basis = fit_pca(grid, 3)?;
    println!("explained variance shares: {:.3?}", basis.explained);
    let out = std::env::temp_dir().join("changekit_pca_t0.png");
    write_rgb_png(&pca_rgb(grid, &basis)?.to_image(), &out)?;
    println!("wrote {}", out.display());

    for hit in semantic_query(grid, s.proposals(Time::T0), 1, 4)? {
        println!("  #{:<3} similarity {:+.3}", hit.proposal.id, hit.similarity);
    }
    Ok(())
}
