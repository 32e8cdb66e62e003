//! Run-directory artifacts: the resolved config copy, machine-readable
//! summaries, detection records, and per-image score files. Everything here
//! writes canonical bytes — pretty JSON with a trailing newline, fields in
//! declaration order, floats in shortest round-trip form — so identical
//! runs produce identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use hoidet::classifiers::{ScoreSet, TripletScoreMode};
use hoidet::eval::{Box, TripletPrediction};
use hoidet::tensor::{Real, Tensor};

use crate::config::RunConfig;
use crate::errors::{CliError, Ctx, Result};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const SUMMARY: &str = "summary.json";

/// Serializes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes =
        serde_json::to_vec_pretty(value).or_internal(&format!("serialize {}", path.display()))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).or_data(&format!("write {}", path.display()))
}

/// Creates the run directory and records the resolved configuration.
pub fn init_run_dir(out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).or_data(&format!("create {}", out.display()))?;
    write_json(&out.join(RESOLVED_CONFIG), cfg)
}

/// The summary envelope every subcommand writes.
#[derive(Debug, Serialize, Deserialize)]
pub struct Summary<T> {
    pub command: String,
    pub status: String,
    #[serde(flatten)]
    pub body: T,
}

pub fn write_summary<T: Serialize>(out: &Path, command: &str, body: T) -> Result<()> {
    let summary = Summary {
        command: command.to_string(),
        status: "ok".to_string(),
        body,
    };
    write_json(&out.join(SUMMARY), &summary)
}

/// One image's detections, as emitted by `infer` and consumed by `eval-map`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image_id: String,
    pub triplets: Vec<DetectionTriplet>,
}

/// One scored triplet; boxes are `[x1, y1, x2, y2]` corners.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionTriplet {
    pub hoi: usize,
    pub human: [Real; 4],
    pub object: [Real; 4],
    pub score: Real,
}

impl DetectionTriplet {
    pub fn from_prediction(p: &TripletPrediction) -> Self {
        Self {
            hoi: p.hoi,
            human: [p.human.x1, p.human.y1, p.human.x2, p.human.y2],
            object: [p.object.x1, p.object.y1, p.object.x2, p.object.y2],
            score: p.score,
        }
    }

    pub fn to_prediction(&self) -> Result<TripletPrediction> {
        let parse = |b: [Real; 4]| Box::new(b[0], b[1], b[2], b[3]);
        Ok(TripletPrediction {
            hoi: self.hoi,
            human: parse(self.human)?,
            object: parse(self.object)?,
            score: self.score,
        })
    }
}

/// Writes one detection record per line, already in output order.
pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let mut out = Vec::new();
    for record in records {
        let line = serde_json::to_string(record)
            .or_internal(&format!("serialize {}", path.display()))?;
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    std::fs::write(path, out).or_data(&format!("write {}", path.display()))
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = std::fs::read_to_string(path).or_data(&format!("read {}", path.display()))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DetectionRecord = serde_json::from_str(line).map_err(|e| {
            CliError::Data(format!("{}: line {}: {e}", path.display(), lineno + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}

/// A tensor in JSON form: shape plus row-major data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorJson {
    pub shape: Vec<usize>,
    pub data: Vec<Real>,
}

impl TensorJson {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

/// Every stage of one image's scoring chain. The enhancement toggle is
/// deliberately not recorded: a `top_k = 0` run and an enhancement-disabled
/// run must produce identical files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreFile {
    pub image_id: String,
    pub alpha: Real,
    pub top_k: usize,
    pub score_mode: TripletScoreMode,
    pub s_inter: TensorJson,
    pub s_v: TensorJson,
    pub s_zs: TensorJson,
    pub s_t: TensorJson,
    pub s_i: TensorJson,
    pub triplet: TensorJson,
}

impl ScoreFile {
    pub fn new(image_id: &str, mode: TripletScoreMode, set: &ScoreSet) -> Self {
        Self {
            image_id: image_id.to_string(),
            alpha: set.alpha,
            top_k: set.top_k,
            score_mode: mode,
            s_inter: TensorJson::from_tensor(&set.s_inter),
            s_v: TensorJson::from_tensor(&set.s_v),
            s_zs: TensorJson::from_tensor(&set.s_zs),
            s_t: TensorJson::from_tensor(&set.s_t),
            s_i: TensorJson::from_tensor(&set.s_i),
            triplet: TensorJson::from_tensor(&set.triplet),
        }
    }
}

/// The `val_split.json` artifact of `make-val-split`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValSplitFile {
    pub seed: u64,
    pub val_size: usize,
    pub val: Vec<String>,
    pub train: Vec<String>,
}
