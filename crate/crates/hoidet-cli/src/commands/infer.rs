//! `infer`: run the frozen model over every dataset image, in parallel,
//! with deterministic output ordering by image id.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use hoidet::data_io::load_dataset;
use hoidet::infer::{infer_image, AttentionDump};
use hoidet::model::load_params;
use hoidet::tensor::{hctf, Real};

use crate::artifacts::{
    write_detections, write_json, write_summary, DetectionRecord, DetectionTriplet, ScoreFile,
};
use crate::commands::{check_model_vs_dataset, load_or_build_classifier, make_bank};
use crate::config::{require_path, RunConfig};
use crate::errors::{Ctx, Result};

#[derive(Serialize)]
struct Body {
    detections: &'static str,
    scores: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    attention: Option<&'static str>,
    num_images: usize,
    num_detections: usize,
    alpha: Real,
    top_k: usize,
    enhance: bool,
    classifier: String,
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = require_path(&cfg.paths.data, "data")?;
    let params_dir = require_path(&cfg.paths.params, "params")?;
    let ds = load_dataset(data)?;
    let (store, model_cfg) = load_params(params_dir)?;
    check_model_vs_dataset(&model_cfg, &ds.manifest.config)?;
    let (e_v, classifier_source) = load_or_build_classifier(cfg, &ds)?;
    let bank = make_bank(e_v, &ds)?;

    let mut ids = ds.manifest.image_ids.clone();
    ids.sort();

    // Per-image fan-out; the indexed collect keeps results in id order no
    // matter how many workers run.
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .or_internal("worker pool")?;
    let results: Vec<(DetectionRecord, ScoreFile, Vec<AttentionDump>)> = pool.install(|| {
        ids.par_iter()
            .map(|id| -> Result<_> {
                let bundle = ds.features(id)?;
                let output = infer_image(
                    &store,
                    &model_cfg,
                    &bank,
                    &ds.taxonomy,
                    &bundle.v_d,
                    &bundle.v_s,
                    &bundle.v_g,
                    &cfg.infer,
                )?;
                let record = DetectionRecord {
                    image_id: id.clone(),
                    triplets: output
                        .triplets
                        .iter()
                        .map(DetectionTriplet::from_prediction)
                        .collect(),
                };
                let scores = ScoreFile::new(id, cfg.infer.score_mode, &output.scores);
                let attention = if cfg.dump_attention {
                    output.attention
                } else {
                    Vec::new()
                };
                Ok((record, scores, attention))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let scores_dir = out.join("scores");
    std::fs::create_dir_all(&scores_dir).or_data(&format!("create {}", scores_dir.display()))?;
    let attention_dir = out.join("attention");
    if cfg.dump_attention {
        std::fs::create_dir_all(&attention_dir)
            .or_data(&format!("create {}", attention_dir.display()))?;
    }

    let mut records = Vec::with_capacity(results.len());
    let mut num_detections = 0;
    for (id, (record, scores, attention)) in ids.iter().zip(results) {
        write_json(&scores_dir.join(format!("{id}.json")), &scores)?;
        for (layer, dump) in attention.iter().enumerate() {
            for (kind, tensors) in [
                ("self", &dump.self_weights),
                ("clip", &dump.clip_weights),
                ("det", &dump.det_weights),
            ] {
                for (head, weights) in tensors.iter().enumerate() {
                    let path = attention_dir.join(format!("{id}.l{layer}.{kind}.h{head}.hctf"));
                    hctf::write_file(&path, weights, hctf::Dtype::F64)
                        .or_data(&format!("write {}", path.display()))?;
                }
            }
        }
        num_detections += record.triplets.len();
        records.push(record);
    }
    write_detections(&out.join("detections.jsonl"), &records)?;

    println!(
        "inferred {} images: {} detections (alpha {}, top_k {}, enhance {})",
        ids.len(),
        num_detections,
        cfg.infer.alpha,
        cfg.infer.top_k,
        cfg.infer.enhance
    );
    write_summary(
        out,
        "infer",
        Body {
            detections: "detections.jsonl",
            scores: "scores",
            attention: cfg.dump_attention.then_some("attention"),
            num_images: ids.len(),
            num_detections,
            alpha: cfg.infer.alpha,
            top_k: cfg.infer.top_k,
            enhance: cfg.infer.enhance,
            classifier: classifier_source,
        },
    )
}
