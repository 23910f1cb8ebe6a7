//! Runs the CVA, CVA-vote and geometric mask-matching baselines on the fixture.

use changekit::baselines::{cva_change_map, cva_match, mask_match};
use changekit::synthetic::two_cluster_fixture;
use changekit::Time;

fn main() -> changekit::Result<()> {
    let s = two_cluster_fixture().session;
    let (intensity, map) = cva_change_map(s.grid(Time::T0), s.grid(Time::T1), s.image_size(), None)?;
    let peak = intensity.argmax();
    println!(
        "cva: {} of {} pixels flagged, peak {:.2} at {:?}",
        map.count_ones(),
        map.data().len(),
        intensity.get(peak.0, peak.1),
        peak
    );
    let voted = cva_match(&s, 0.5)?;
    println!("cva-match: {} proposals", voted.len());
    // the fixture reuses one mask per object at both times
    let unmatched = mask_match(&s, 0.5)?;
    println!("mask-match: {} proposals", unmatched.len());
    Ok(())
}
