//! Writes a session to disk in the exchange formats and loads it back.

use changekit::interchange::{read_tensor_archive, LoadOptions, RleOrder, SessionManifest};
use changekit::synthetic::two_cluster_fixture;
use changekit::{Session, Time};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("changekit_roundtrip");
    std::fs::create_dir_all(&dir)?;
    let original = two_cluster_fixture().session;
    let manifest_path = changekit::synthetic::write_session(&dir, "scene", &original)?;
    let manifest = SessionManifest::read(&manifest_path)?;
    println!("manifest {} -> image {:?}", manifest_path.display(), manifest.image_size());

    let grid = read_tensor_archive(&manifest.pre_embedding)?;
    assert_eq!(grid.values(), original.grid(Time::T0).values());
    println!("grid {:?} restored bit for bit", grid.shape());
    let loaded = Session::load_path(&manifest_path, &LoadOptions::unfiltered())?;
    println!("{} + {} proposals reloaded", loaded.proposals(Time::T0).len(), loaded.proposals(Time::T1).len());

    let mask = &loaded.proposals(Time::T0)[0].mask;
    println!("row-major counts {:?}", mask.counts());
    println!("col-major counts {:?}", mask.ordered_counts(RleOrder::ColMajor));
    Ok(())
}
