//! Detects changes on the synthetic two-cluster scene under each selection mode.
//!
//! Run with `cargo run --example detect_changes`.

use changekit::synthetic::two_cluster_fixture;
use changekit::{bitemporal_latent_match, MatchConfig};

fn main() -> changekit::Result<()> {
    let fixture = two_cluster_fixture();
    for config in [MatchConfig::default(), MatchConfig::top_k(4), MatchConfig::auto()] {
        let changes = bitemporal_latent_match(&fixture.session, &config)?;
        println!("{} -> {} changes", config.mode, changes.len());
        for c in &changes {
            println!("  {} #{:<4} angle {:6.1}  score {:+.3}", c.source_time, c.proposal_id, c.angle_deg, c.score);
        }
    }
    println!("ground truth: {:?}", fixture.changed());
    Ok(())
}
