//! Channel-gain perturbations: uniform rescaling versus per-channel jitter.

use changekit::robustness::radiometric_harness;
use changekit::synthetic::{random_session, two_cluster_fixture, RandomSessionParams};
use changekit::MatchConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> changekit::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sessions: Vec<_> = (0..20).map(|_| random_session(&mut rng, &RandomSessionParams::default())).collect();
    sessions.push(two_cluster_fixture().session);
    for strength in [0.05, 0.2, 0.5] {
        let report = radiometric_harness(&sessions, &MatchConfig::auto(), &mut rng, strength)?;
        println!(
            "jitter {strength:.2}: uniform changes {}, jitter changes {} ({:.1}% of {} selected)",
            report.uniform_changes(),
            report.jitter_changes(),
            100.0 * report.jitter_rate(),
            report.baseline_selected.iter().sum::<usize>()
        );
    }
    Ok(())
}
