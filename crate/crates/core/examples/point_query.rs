//! Narrows detected changes to the semantic class of a clicked object.

use changekit::matching::{point_query_filter, PointQuery};
use changekit::synthetic::two_cluster_fixture;
use changekit::{bitemporal_latent_match, MatchConfig, Time};

fn main() -> changekit::Result<()> {
    let fixture = two_cluster_fixture();
    let changes = bitemporal_latent_match(&fixture.session, &MatchConfig::default())?;
    println!("{} changes before filtering", changes.len());
    for cluster in 0..2 {
        let clicks: Vec<_> = (0..3).map(|n| fixture.point_on(cluster, n, Time::T0)).collect();
        for n in [1, 3] {
            let query = PointQuery::new(clicks[..n].to_vec()).with_angle(45.0);
            let kept = point_query_filter(&changes, &query, &fixture.session)?;
            let ids: Vec<_> = kept.iter().map(|c| format!("{}:{}", c.source_time, c.proposal_id)).collect();
            println!("cluster {cluster}, {n} point(s): {}", ids.join(" "));
        }
        println!("  expected: {:?}", fixture.changed_in(cluster));
    }
    Ok(())
}
