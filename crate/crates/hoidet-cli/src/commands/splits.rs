//! `make-splits` and `make-val-split`: category and image partitions.

use std::path::Path;

use serde::Serialize;

use hoidet::data_io::{load_dataset, save_split};
use hoidet::eval::{construct_split, default_unseen_count, make_validation_split, SplitMode};

use crate::artifacts::{write_json, write_summary, ValSplitFile};
use crate::config::{require_path, RunConfig};
use crate::errors::{CliError, Result};

fn mode_name(mode: SplitMode) -> &'static str {
    match mode {
        SplitMode::RfUc => "rf-uc",
        SplitMode::NfUc => "nf-uc",
        SplitMode::Uo => "uo",
        SplitMode::Uv => "uv",
        SplitMode::UcFile => "uc-file",
    }
}

#[derive(Serialize)]
struct SplitBody {
    split: String,
    mode: &'static str,
    seed: u64,
    requested: usize,
    num_unseen: usize,
    num_seen: usize,
}

pub fn run_make_splits(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = require_path(&cfg.paths.data, "data")?;
    let ds = load_dataset(data)?;
    let requested = cfg
        .n_unseen
        .unwrap_or_else(|| default_unseen_count(cfg.split_mode));
    let split = construct_split(
        cfg.split_mode,
        &ds.taxonomy,
        cfg.seed,
        requested,
        cfg.paths.unseen_file.as_deref(),
    )?;
    let name = mode_name(cfg.split_mode);
    save_split(out, name, &split)?;
    println!(
        "split {}: {} unseen / {} seen categories",
        name,
        split.unseen.len(),
        split.seen.len()
    );
    write_summary(
        out,
        "make-splits",
        SplitBody {
            split: format!("splits/{name}.json"),
            mode: name,
            seed: cfg.seed,
            requested,
            num_unseen: split.unseen.len(),
            num_seen: split.seen.len(),
        },
    )
}

#[derive(Serialize)]
struct ValBody {
    val_split: &'static str,
    seed: u64,
    val_size: usize,
    num_val: usize,
    num_train: usize,
}

pub fn run_make_val_split(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = require_path(&cfg.paths.data, "data")?;
    let ds = load_dataset(data)?;
    let ids = &ds.manifest.image_ids;
    let val_size = cfg.val_size.unwrap_or_else(|| ids.len().div_ceil(5));

    let image_categories: Vec<Vec<usize>> = ids
        .iter()
        .map(|id| {
            ds.annotations[id]
                .iter()
                .flat_map(|t| t.hoi_labels.iter().copied())
                .collect()
        })
        .collect();
    let (val_idx, train_idx) = make_validation_split(&image_categories, val_size, cfg.seed)?;
    let pick = |indices: &[usize]| -> Result<Vec<String>> {
        indices
            .iter()
            .map(|&i| {
                ids.get(i).cloned().ok_or_else(|| {
                    CliError::Internal(format!("split index {i} out of range {}", ids.len()))
                })
            })
            .collect()
    };
    let file = ValSplitFile {
        seed: cfg.seed,
        val_size,
        val: pick(&val_idx)?,
        train: pick(&train_idx)?,
    };
    write_json(&out.join("val_split.json"), &file)?;
    println!(
        "validation split: {} val / {} train images",
        file.val.len(),
        file.train.len()
    );
    write_summary(
        out,
        "make-val-split",
        ValBody {
            val_split: "val_split.json",
            seed: cfg.seed,
            val_size,
            num_val: file.val.len(),
            num_train: file.train.len(),
        },
    )
}
