//! Inference: one forward pass per image, cosine scoring against the
//! classifier bank, zero-shot enhancement, and triplet NMS.

use serde::{Deserialize, Serialize};

use crate::classifiers::{score_pipeline, score_pipeline_plain, ClassifierBank, ClassifierError,
    ScoreSet, Taxonomy, TripletScoreMode};
use crate::eval::{triplet_nms, Box, EvalError, TripletPrediction, NMS_IOU_THRESH, NMS_KEEP_TOP};
use crate::model::{model_forward, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Graph, Real, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum InferError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, InferError>;

/// Inference-time knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Verb-score fusion weight α.
    pub alpha: Real,
    /// Zero-shot enhancement keeps this many global-feature similarities.
    pub top_k: usize,
    /// When false the enhancement stage is never evaluated: scores flow
    /// through [`score_pipeline_plain`] and `top_k` is ignored.
    pub enhance: bool,
    pub score_mode: TripletScoreMode,
    pub nms_iou: Real,
    pub keep_top: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            top_k: 10,
            enhance: true,
            score_mode: TripletScoreMode::default(),
            nms_iou: NMS_IOU_THRESH,
            keep_top: NMS_KEEP_TOP,
        }
    }
}

/// Everything one forward pass produces for an image.
#[derive(Debug, Clone)]
pub struct InferOutput {
    /// NMS survivors, ready for evaluation.
    pub triplets: Vec<TripletPrediction>,
    /// All intermediate score stages `[N_q × …]`.
    pub scores: ScoreSet,
    /// Predicted boxes `[N_q × 4]`, center format.
    pub b_h: Tensor,
    pub b_o: Tensor,
    /// Object-class probabilities `[N_q × (K_o + 1)]`.
    pub c_o: Tensor,
    /// Per-layer knowledge-integration attention maps, row-stochastic
    /// `[N_q × tokens]`, one per head: (self, clip-stream, det-stream).
    pub attention: Vec<AttentionDump>,
}

/// One decoder layer's attention maps, materialized.
#[derive(Debug, Clone)]
pub struct AttentionDump {
    pub self_weights: Vec<Tensor>,
    pub clip_weights: Vec<Tensor>,
    pub det_weights: Vec<Tensor>,
}

/// Runs the frozen model on one image and scores its queries.
pub fn infer_image(
    store: &ParamStore,
    model_cfg: &ModelConfig,
    bank: &ClassifierBank,
    tax: &Taxonomy,
    v_d: &Tensor,
    v_s: &Tensor,
    v_g: &Tensor,
    cfg: &InferConfig,
) -> Result<InferOutput> {
    let mut g = Graph::new();
    let bound = store.bind_all(&mut g, false);
    let outputs = model_forward(&mut g, &bound, model_cfg, v_d, v_s)?;
    let last = outputs.final_layer();

    let o_inter = g.value(last.o_inter).clone();
    let o_verb = g.value(last.o_verb).clone();
    let b_h = g.value(last.instance.b_h).clone();
    let b_o = g.value(last.instance.b_o).clone();
    let c_o = g.value(last.instance.c_o).clone();

    let scores = if cfg.enhance {
        score_pipeline(
            &o_inter,
            &o_verb,
            &c_o,
            v_g,
            bank,
            tax,
            cfg.alpha,
            cfg.top_k,
            cfg.score_mode,
        )?
    } else {
        score_pipeline_plain(&o_inter, &o_verb, &c_o, bank, tax, cfg.alpha, cfg.score_mode)?
    };

    // Every (query, category) pair is a candidate triplet.
    let n_q = b_h.shape()[0];
    let kh = tax.num_hois();
    let mut candidates = Vec::with_capacity(n_q * kh);
    for q in 0..n_q {
        let hb = row_box(&b_h, q)?;
        let ob = row_box(&b_o, q)?;
        for hoi in 0..kh {
            candidates.push(TripletPrediction {
                hoi,
                human: hb,
                object: ob,
                score: scores.triplet.data()[q * kh + hoi],
            });
        }
    }
    let triplets = triplet_nms(&candidates, cfg.nms_iou, cfg.keep_top)?;

    let attention = outputs
        .diagnostics
        .iter()
        .map(|d| AttentionDump {
            self_weights: d.self_weights.iter().map(|&id| g.value(id).clone()).collect(),
            clip_weights: d.clip_weights.iter().map(|&id| g.value(id).clone()).collect(),
            det_weights: d.det_weights.iter().map(|&id| g.value(id).clone()).collect(),
        })
        .collect();

    Ok(InferOutput {
        triplets,
        scores,
        b_h,
        b_o,
        c_o,
        attention,
    })
}

fn row_box(boxes: &Tensor, q: usize) -> Result<Box> {
    let r = boxes.row(q);
    Ok(Box::from_cxcywh(r[0], r[1], r[2], r[3])?)
}
