//! `eval-map`: score a detections file against dataset ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use hoidet::data_io::{load_dataset, load_split};
use hoidet::eval::{compute_map, ApInterpolation, Box, EvalItem, GroundTruthBox, MapReport,
    TripletPrediction};
use hoidet::matching_loss::GroundTruthTriplet;

use crate::artifacts::{read_detections, write_summary};
use crate::config::{require_path, RunConfig};
use crate::errors::{CliError, Result};

#[derive(Serialize)]
struct Body {
    num_images: usize,
    num_detections: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    subset_size: Option<usize>,
    map: MapReport,
}

fn ground_truth_boxes(triplets: &[GroundTruthTriplet]) -> Result<Vec<GroundTruthBox>> {
    let mut boxes = Vec::new();
    for t in triplets {
        let human = Box::from_cxcywh(t.human_box[0], t.human_box[1], t.human_box[2], t.human_box[3])?;
        let object =
            Box::from_cxcywh(t.object_box[0], t.object_box[1], t.object_box[2], t.object_box[3])?;
        for &hoi in &t.hoi_labels {
            boxes.push(GroundTruthBox { hoi, human, object });
        }
    }
    Ok(boxes)
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = require_path(&cfg.paths.data, "data")?;
    let det_path = require_path(&cfg.paths.detections, "detections")?;
    let ds = load_dataset(data)?;

    let mut by_image: BTreeMap<String, Vec<TripletPrediction>> = BTreeMap::new();
    let mut num_detections = 0;
    for record in read_detections(det_path)? {
        if !ds.annotations.contains_key(&record.image_id) {
            return Err(CliError::Data(format!(
                "detections reference unknown image {}",
                record.image_id
            )));
        }
        let slot = by_image.entry(record.image_id).or_default();
        for t in &record.triplets {
            slot.push(t.to_prediction()?);
            num_detections += 1;
        }
    }

    let subset = match &cfg.paths.split {
        Some(path) => Some(load_split(path)?),
        None => None,
    };

    let mut ids = ds.manifest.image_ids.clone();
    ids.sort();
    let mut items = Vec::with_capacity(ids.len());
    for id in &ids {
        items.push(EvalItem {
            predictions: by_image.remove(id).unwrap_or_default(),
            ground_truth: ground_truth_boxes(&ds.annotations[id])?,
        });
    }

    let report = compute_map(
        &items,
        &ds.taxonomy,
        subset.as_ref().map(|s| s.unseen.as_slice()),
        ApInterpolation::Envelope,
    )?;
    println!("mAP {:.4}", report.full);
    write_summary(
        out,
        "eval-map",
        Body {
            num_images: ids.len(),
            num_detections,
            subset_size: subset.as_ref().map(|s| s.unseen.len()),
            map: report,
        },
    )
}
