//! `gen-synth`: materialize a synthetic dataset directory.

use std::path::Path;

use serde::Serialize;

use hoidet::data_io::{generate_synthetic, save_dataset};

use crate::artifacts::write_summary;
use crate::config::RunConfig;
use crate::errors::Result;

#[derive(Serialize)]
struct Body {
    dataset: &'static str,
    seed: u64,
    num_images: usize,
    num_objects: usize,
    num_verbs: usize,
    num_hois: usize,
    num_instances: usize,
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<()> {
    let world = generate_synthetic(&cfg.synth)?;
    save_dataset(&world, &out.join("dataset"))?;
    let num_instances: usize = world.scenes.iter().map(|s| s.instances.len()).sum();
    println!(
        "generated {} images, {} HOI categories ({} objects × {} verbs), {} instances",
        world.scenes.len(),
        world.taxonomy.num_hois(),
        world.taxonomy.num_objects(),
        world.taxonomy.num_verbs(),
        num_instances
    );
    write_summary(
        out,
        "gen-synth",
        Body {
            dataset: "dataset",
            seed: cfg.synth.seed,
            num_images: world.scenes.len(),
            num_objects: world.taxonomy.num_objects(),
            num_verbs: world.taxonomy.num_verbs(),
            num_hois: world.taxonomy.num_hois(),
            num_instances,
        },
    )
}
