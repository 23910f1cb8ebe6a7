//! Turns detections on a batch of random sessions into binary change rasters.

use changekit::interchange::write_change_map_png;
use changekit::matching::rasterize_changes;
use changekit::synthetic::{random_session, RandomSessionParams};
use changekit::{bitemporal_latent_match, MatchConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = std::env::temp_dir().join("changekit_labels");
    std::fs::create_dir_all(&out)?;
    for i in 0..4 {
        let session = random_session(&mut rng, &RandomSessionParams::default());
        let changes = bitemporal_latent_match(&session, &MatchConfig::auto())?;
        let map = rasterize_changes(&changes, session.image_size())?;
        let coverage = map.count_ones() as f64 / map.data().len() as f64;
        let path = out.join(format!("pair{i}.png"));
        write_change_map_png(&map, &path)?;
        println!("{}: {} changes, {:.1}% of pixels", path.display(), changes.len(), 100.0 * coverage);
    }
    Ok(())
}
