//! `subsample` — derive a smaller dataset by keeping a seeded fraction of
//! the training images.

use std::path::Path;

use hoidet::data_io::{load_dataset, save_manifest_subset, subsample_training};
use serde::Serialize;

use crate::artifacts::write_summary;
use crate::config::{require_path, RunConfig};
use crate::errors::Result;

#[derive(Serialize)]
struct Body {
    dataset: &'static str,
    kept: usize,
    total: usize,
    fraction: f64,
    seed: u64,
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = require_path(&cfg.paths.data, "data")?;
    let ds = load_dataset(data)?;
    let subset = subsample_training(&ds.manifest, cfg.fraction, cfg.seed)?;
    let kept = subset.image_ids.len();
    let total = ds.manifest.image_ids.len();
    save_manifest_subset(&ds, &subset, &out.join("dataset"))?;
    println!("kept {kept} of {total} images (fraction {})", cfg.fraction);
    write_summary(
        out,
        "subsample",
        &Body {
            dataset: "dataset",
            kept,
            total,
            fraction: cfg.fraction,
            seed: cfg.seed,
        },
    )
}
