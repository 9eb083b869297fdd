//! Regenerate the repo's stock manifests from the constructors.
use std::path::PathBuf;
use volsynth_core::manifest::ExperimentManifest;

fn main() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../manifests");
    ExperimentManifest::desk(PathBuf::from("runs/desk"))
        .save(&root.join("desk.json"))
        .unwrap();
    ExperimentManifest::full(PathBuf::from("runs/full"))
        .save(&root.join("full.json"))
        .unwrap();
    println!("wrote desk.json and full.json");
}
