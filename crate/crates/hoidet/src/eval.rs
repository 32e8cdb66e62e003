//! Box geometry, triplet NMS, mAP protocol, and zero-shot split
//! construction.
//!
//! A detection is a true positive iff both its human and object boxes
//! overlap an unmatched ground-truth pair of the same HOI category with
//! IoU > 0.5 (greedy matching by descending confidence, one match per
//! ground truth). Per-category AP is the area under the precision
//! envelope; the "rare" breakdown covers categories with fewer than 10
//! training instances.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::Taxonomy;
use crate::tensor::Real;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("HOI category {category} out of range 0..{max}")]
    UnknownCategory { category: usize, max: usize },
    #[error("bad split mode: {0}")]
    BadMode(String),
    #[error("split file {path}: {detail}")]
    FileError { path: String, detail: String },
    #[error("validation split infeasible: {0}")]
    Infeasible(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

// ── Geometry ────────────────────────────────────────────────────────────

/// Axis-aligned box with corners `(x1, y1)` ≤ `(x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub x1: Real,
    pub y1: Real,
    pub x2: Real,
    pub y2: Real,
}

impl Box {
    pub fn new(x1: Real, y1: Real, x2: Real, y2: Real) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    /// Converts from center format `(cx, cy, w, h)`.
    pub fn from_cxcywh(cx: Real, cy: Real, w: Real, h: Real) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.x2 >= self.x1
            && self.y2 >= self.y1
            && [self.x1, self.y1, self.x2, self.y2]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(EvalError::InvalidBox(format!("{self:?}")))
        }
    }

    pub fn area(&self) -> Real {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

fn intersection_area(a: &Box, b: &Box) -> Real {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// Intersection over union; 0 for disjoint boxes (and for degenerate
/// zero-area unions).
pub fn box_iou(a: &Box, b: &Box) -> Result<Real> {
    a.validate()?;
    b.validate()?;
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok(inter / union)
}

/// Generalized IoU: `IoU − (hull − union) / hull`, in `[−1, 1]`.
pub fn giou(a: &Box, b: &Box) -> Result<Real> {
    a.validate()?;
    b.validate()?;
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let hull_w = a.x2.max(b.x2) - a.x1.min(b.x1);
    let hull_h = a.y2.max(b.y2) - a.y1.min(b.y1);
    let hull = hull_w * hull_h;
    if hull <= 0.0 {
        // Both boxes degenerate to the same point/segment.
        return Ok(0.0);
    }
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    Ok(iou - (hull - union) / hull)
}

// ── Triplet NMS ─────────────────────────────────────────────────────────

/// One scored HOI triplet detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletPrediction {
    pub hoi: usize,
    pub human: Box,
    pub object: Box,
    pub score: Real,
}

/// Greedy per-category suppression: a triplet is removed when a
/// higher-scoring kept triplet of the same category overlaps it with
/// `min(IoU_human, IoU_object) > iou_thresh`. Survivors are then cut to
/// the global `keep_top` by score. Ties break toward earlier input order.
pub fn triplet_nms(
    predictions: &[TripletPrediction],
    iou_thresh: Real,
    keep_top: usize,
) -> Result<Vec<TripletPrediction>> {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| predictions[b].score.total_cmp(&predictions[a].score));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let p = &predictions[i];
        let mut suppressed = false;
        for &k in &kept {
            let q = &predictions[k];
            if q.hoi != p.hoi {
                continue;
            }
            let overlap = box_iou(&q.human, &p.human)?.min(box_iou(&q.object, &p.object)?);
            if overlap > iou_thresh {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(i);
        }
    }
    kept.truncate(keep_top);
    // Deterministic output order: by descending score (input order on ties),
    // which `kept` already follows.
    Ok(kept.into_iter().map(|i| predictions[i]).collect())
}

/// NMS defaults: suppression threshold and global keep count.
pub const NMS_IOU_THRESH: Real = 0.7;
pub const NMS_KEEP_TOP: usize = 100;

// ── mAP ─────────────────────────────────────────────────────────────────

/// One ground-truth triplet for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub hoi: usize,
    pub human: Box,
    pub object: Box,
}

/// Predictions and ground truth for one image.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalItem {
    pub predictions: Vec<TripletPrediction>,
    pub ground_truth: Vec<GroundTruthBox>,
}

/// How per-category AP integrates the precision/recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ApInterpolation {
    /// Area under the precision envelope over all recall points.
    #[default]
    Envelope,
    /// Mean envelope precision at recalls 0.0, 0.1, …, 1.0.
    ElevenPoint,
}

/// IoU a detection must exceed (on both boxes) to match a ground truth.
pub const MATCH_IOU: Real = 0.5;

/// mAP results: per-category AP (only categories with ground truth) and
/// full / rare / non-rare means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapReport {
    pub per_category: BTreeMap<usize, Real>,
    pub full: Real,
    pub rare: Option<Real>,
    pub non_rare: Option<Real>,
}

/// Computes HOI detection mAP over `items`. `subset` restricts evaluation
/// to the given categories (e.g. a zero-shot unseen set); categories
/// without ground truth are excluded from every mean.
pub fn compute_map(
    items: &[EvalItem],
    tax: &Taxonomy,
    subset: Option<&[usize]>,
    interpolation: ApInterpolation,
) -> Result<MapReport> {
    let kh = tax.num_hois();
    for item in items {
        for p in &item.predictions {
            check_category(p.hoi, kh)?;
        }
        for gt in &item.ground_truth {
            check_category(gt.hoi, kh)?;
        }
    }
    let categories: Vec<usize> = match subset {
        Some(s) => {
            for &c in s {
                check_category(c, kh)?;
            }
            s.to_vec()
        }
        None => (0..kh).collect(),
    };

    let mut per_category = BTreeMap::new();
    for &c in &categories {
        if let Some(ap) = category_ap(items, c, interpolation)? {
            per_category.insert(c, ap);
        }
    }
    let rare_set: std::collections::BTreeSet<usize> = tax.rare_categories().into_iter().collect();
    let mean = |keep: &dyn Fn(usize) -> bool| -> Option<Real> {
        let vals: Vec<Real> = per_category
            .iter()
            .filter(|(c, _)| keep(**c))
            .map(|(_, ap)| *ap)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<Real>() / vals.len() as Real)
        }
    };
    let full = mean(&|_| true).unwrap_or(0.0);
    let rare = mean(&|c| rare_set.contains(&c));
    let non_rare = mean(&|c| !rare_set.contains(&c));
    Ok(MapReport {
        per_category,
        full,
        rare,
        non_rare,
    })
}

fn check_category(c: usize, kh: usize) -> Result<()> {
    if c >= kh {
        return Err(EvalError::UnknownCategory {
            category: c,
            max: kh,
        });
    }
    Ok(())
}

/// AP for one category, or `None` when the category has no ground truth.
fn category_ap(
    items: &[EvalItem],
    category: usize,
    interpolation: ApInterpolation,
) -> Result<Option<Real>> {
    let n_gt: usize = items
        .iter()
        .map(|it| it.ground_truth.iter().filter(|g| g.hoi == category).count())
        .sum();
    if n_gt == 0 {
        return Ok(None);
    }

    // All predictions of this category, tagged with their image.
    let mut preds: Vec<(usize, &TripletPrediction)> = Vec::new();
    for (img, item) in items.iter().enumerate() {
        for p in &item.predictions {
            if p.hoi == category {
                preds.push((img, p));
            }
        }
    }
    preds.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    // Greedy matching: each prediction may claim one unmatched GT of its
    // image whose both-box IoU exceeds the threshold; among candidates the
    // largest min-IoU wins (lowest GT index on ties).
    let mut matched: Vec<Vec<bool>> = items
        .iter()
        .map(|it| vec![false; it.ground_truth.len()])
        .collect();
    let mut tp_flags = Vec::with_capacity(preds.len());
    for (img, p) in &preds {
        let mut best: Option<(usize, Real)> = None;
        for (gi, gt) in items[*img].ground_truth.iter().enumerate() {
            if gt.hoi != category || matched[*img][gi] {
                continue;
            }
            let ih = box_iou(&gt.human, &p.human)?;
            let io = box_iou(&gt.object, &p.object)?;
            if ih > MATCH_IOU && io > MATCH_IOU {
                let overlap = ih.min(io);
                if best.is_none_or(|(_, b)| overlap > b) {
                    best = Some((gi, overlap));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                matched[*img][gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }
    Ok(Some(average_precision(&tp_flags, n_gt, interpolation)))
}

/// AP from an ordered TP/FP sequence (descending score order).
fn average_precision(tp_flags: &[bool], n_gt: usize, interpolation: ApInterpolation) -> Real {
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as Real / (i + 1) as Real);
        recalls.push(tp as Real / n_gt as Real);
    }
    // Precision envelope: max precision at any recall ≥ r.
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    match interpolation {
        ApInterpolation::Envelope => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for i in 0..envelope.len() {
                if recalls[i] > prev_recall {
                    ap += (recalls[i] - prev_recall) * envelope[i];
                    prev_recall = recalls[i];
                }
            }
            ap
        }
        ApInterpolation::ElevenPoint => {
            let mut total = 0.0;
            for step in 0..=10 {
                let r = step as Real / 10.0;
                let p = recalls
                    .iter()
                    .zip(&envelope)
                    .find(|(rec, _)| **rec >= r - 1e-12)
                    .map(|(_, p)| *p)
                    .unwrap_or(0.0);
                total += p;
            }
            total / 11.0
        }
    }
}

// ── Zero-shot splits ────────────────────────────────────────────────────

/// How the unseen category set is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Rare first: the least-frequent categories become unseen.
    RfUc,
    /// Non-rare first: the most-frequent categories become unseen.
    NfUc,
    /// All categories touching a seeded-random set of objects.
    Uo,
    /// All categories touching a seeded-random set of verbs.
    Uv,
    /// Explicit category list from a JSON file.
    UcFile,
}

impl std::str::FromStr for SplitMode {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rf-uc" => Ok(Self::RfUc),
            "nf-uc" => Ok(Self::NfUc),
            "uo" => Ok(Self::Uo),
            "uv" => Ok(Self::Uv),
            "uc-file" => Ok(Self::UcFile),
            other => Err(EvalError::BadMode(other.into())),
        }
    }
}

/// A seen/unseen partition of the HOI categories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub seed: u64,
    /// Sorted unseen HOI category ids.
    pub unseen: Vec<usize>,
    /// Sorted complement.
    pub seen: Vec<usize>,
}

/// Default unseen sizes: 120 categories (RF/NF), 12 objects, 20 verbs.
pub fn default_unseen_count(mode: SplitMode) -> usize {
    match mode {
        SplitMode::RfUc | SplitMode::NfUc => 120,
        SplitMode::Uo => 12,
        SplitMode::Uv => 20,
        SplitMode::UcFile => 0,
    }
}

/// Builds a zero-shot split. `n_unseen` counts HOI categories for RF/NF
/// modes, held-out objects for UO, held-out verbs for UV; `file` supplies
/// the category list for UC-file mode.
pub fn construct_split(
    mode: SplitMode,
    tax: &Taxonomy,
    seed: u64,
    n_unseen: usize,
    file: Option<&Path>,
) -> Result<SplitSpec> {
    let kh = tax.num_hois();
    let mut unseen: Vec<usize> = match mode {
        SplitMode::RfUc | SplitMode::NfUc => {
            if n_unseen > kh {
                return Err(EvalError::BadMode(format!(
                    "{n_unseen} unseen categories requested but only {kh} exist"
                )));
            }
            let mut order: Vec<usize> = (0..kh).collect();
            match mode {
                SplitMode::RfUc => {
                    order.sort_by_key(|&n| (tax.hois[n].count, n));
                }
                _ => {
                    order.sort_by_key(|&n| (std::cmp::Reverse(tax.hois[n].count), n));
                }
            }
            order.truncate(n_unseen);
            order
        }
        SplitMode::Uo => entity_split(tax, seed, n_unseen, tax.num_objects(), |h| h.object)?,
        SplitMode::Uv => entity_split(tax, seed, n_unseen, tax.num_verbs(), |h| h.verb)?,
        SplitMode::UcFile => {
            let path = file.ok_or_else(|| {
                EvalError::BadMode("uc-file mode requires a split file".into())
            })?;
            let text = std::fs::read_to_string(path).map_err(|e| EvalError::FileError {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
            let ids: Vec<usize> =
                serde_json::from_str(&text).map_err(|e| EvalError::FileError {
                    path: path.display().to_string(),
                    detail: e.to_string(),
                })?;
            for &c in &ids {
                check_category(c, kh).map_err(|_| EvalError::FileError {
                    path: path.display().to_string(),
                    detail: format!("category {c} out of range 0..{kh}"),
                })?;
            }
            ids
        }
    };
    unseen.sort_unstable();
    unseen.dedup();
    let unseen_set: std::collections::BTreeSet<usize> = unseen.iter().copied().collect();
    let seen: Vec<usize> = (0..kh).filter(|c| !unseen_set.contains(c)).collect();
    Ok(SplitSpec {
        mode,
        seed,
        unseen,
        seen,
    })
}

/// Unseen categories induced by holding out `n` seeded-random entities
/// (objects or verbs).
fn entity_split(
    tax: &Taxonomy,
    seed: u64,
    n: usize,
    num_entities: usize,
    key: impl Fn(&crate::classifiers::HoiCategory) -> usize,
) -> Result<Vec<usize>> {
    if n > num_entities {
        return Err(EvalError::BadMode(format!(
            "{n} held-out entities requested but only {num_entities} exist"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = (0..num_entities).collect();
    ids.shuffle(&mut rng);
    let held: std::collections::BTreeSet<usize> = ids.into_iter().take(n).collect();
    Ok((0..tax.num_hois())
        .filter(|&c| held.contains(&key(&tax.hois[c])))
        .collect())
}

// ── Validation split ────────────────────────────────────────────────────

/// Splits training images into (validation, remaining-train) index sets
/// such that every HOI category present in the input keeps at least one
/// instance in the remaining training set. `image_categories[i]` lists the
/// HOI categories of image `i`'s annotations (with multiplicity).
pub fn make_validation_split(
    image_categories: &[Vec<usize>],
    val_size: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if val_size > image_categories.len() {
        return Err(EvalError::Infeasible(format!(
            "requested {val_size} validation images from {}",
            image_categories.len()
        )));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for cats in image_categories {
        for &c in cats {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    let mut order: Vec<usize> = (0..image_categories.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut in_val = vec![false; image_categories.len()];
    let mut taken = 0;
    for &img in &order {
        if taken == val_size {
            break;
        }
        // The image may move to validation only if every category it
        // carries retains at least one training instance elsewhere.
        let mut local: BTreeMap<usize, usize> = BTreeMap::new();
        for &c in &image_categories[img] {
            *local.entry(c).or_insert(0) += 1;
        }
        let movable = local.iter().all(|(c, k)| counts[c] > *k);
        if movable {
            for (c, k) in local {
                *counts.get_mut(&c).unwrap() -= k;
            }
            in_val[img] = true;
            taken += 1;
        }
    }
    if taken < val_size {
        return Err(EvalError::Infeasible(format!(
            "only {taken} of {val_size} images can move to validation without losing class coverage"
        )));
    }
    let val: Vec<usize> = (0..in_val.len()).filter(|&i| in_val[i]).collect();
    let train: Vec<usize> = (0..in_val.len()).filter(|&i| !in_val[i]).collect();
    Ok((val, train))
}
