//! `train-toy`: optimize the model on a (possibly subsampled) dataset.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use hoidet::data_io::{load_dataset, subsample_training};
use hoidet::model::{init_model, save_params};
use hoidet::tensor::Real;
use hoidet::train::{train, TrainExample};

use crate::artifacts::write_summary;
use crate::commands::{check_model_vs_dataset, load_or_build_classifier, make_bank};
use crate::config::{require_path, RunConfig};
use crate::errors::{CliError, Ctx, Result};

#[derive(Serialize)]
struct Body {
    checkpoint: &'static str,
    train_log: &'static str,
    classifier: String,
    steps: usize,
    num_examples: usize,
    fraction: Real,
    seed: u64,
    init_seed: u64,
    first_loss: Real,
    final_loss: Real,
    final_grad_norm: Real,
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = require_path(&cfg.paths.data, "data")?;
    let ds = load_dataset(data)?;
    check_model_vs_dataset(&cfg.model, &ds.manifest.config)?;

    let manifest = subsample_training(&ds.manifest, cfg.fraction, cfg.seed)?;
    let (e_v, classifier_source) = load_or_build_classifier(cfg, &ds)?;
    let bank = make_bank(e_v, &ds)?;

    let mut examples = Vec::with_capacity(manifest.image_ids.len());
    for id in &manifest.image_ids {
        let bundle = ds.features(id)?;
        let targets = ds
            .annotations
            .get(id)
            .ok_or_else(|| CliError::Internal(format!("validated image {id} lost its targets")))?
            .clone();
        examples.push(TrainExample {
            image_id: id.clone(),
            v_d: bundle.v_d,
            v_s: bundle.v_s,
            targets,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut store = init_model(&cfg.model, &mut rng)?;
    let records = train(
        &mut store,
        &cfg.model,
        &examples,
        &bank.e_inter,
        &bank.e_v,
        &ds.taxonomy,
        &cfg.train,
        |_| {},
    )?;

    let log_path = out.join("train_log.jsonl");
    let mut log = Vec::new();
    for record in &records {
        let line = serde_json::to_string(record).or_internal("serialize step record")?;
        log.extend_from_slice(line.as_bytes());
        log.push(b'\n');
    }
    std::fs::write(&log_path, log).or_data(&format!("write {}", log_path.display()))?;

    save_params(&store, &cfg.model, &out.join("checkpoint"))?;

    let first = records.first().map(|r| r.loss).unwrap_or(0.0);
    let last = records.last().map(|r| r.loss).unwrap_or(0.0);
    let grad_norm = records.last().map(|r| r.grad_norm).unwrap_or(0.0);
    println!(
        "trained {} steps on {} images: loss {:.6} → {:.6}",
        records.len(),
        examples.len(),
        first,
        last
    );
    write_summary(
        out,
        "train-toy",
        Body {
            checkpoint: "checkpoint",
            train_log: "train_log.jsonl",
            classifier: classifier_source,
            steps: records.len(),
            num_examples: examples.len(),
            fraction: cfg.fraction,
            seed: cfg.train.seed,
            init_seed: cfg.init_seed,
            first_loss: first,
            final_loss: last,
            final_grad_norm: grad_norm,
        },
    )
}
