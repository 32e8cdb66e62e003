//! Bipartite ground-truth/query matching and the training loss.
//!
//! Ground-truth triplets are assigned to decoder queries by minimizing a
//! combined cost (box L1 + GIoU + object class + HOI focal terms) with the
//! Hungarian algorithm, then each layer is supervised on the matched pairs:
//! L1 and GIoU box losses, object cross-entropy with a down-weighted
//! no-object class, and focal binary cross-entropy on the fused HOI logits.
//! Auxiliary (intermediate-layer) losses reuse the final-layer matching by
//! default.

use serde::{Deserialize, Serialize};

use crate::classifiers::Taxonomy;
use crate::eval::{self, Box as EvalBox};
use crate::tensor::{log_sigmoid, sigmoid_scalar, Graph, Real, Tensor, TensorError, TensorId};

#[derive(Debug, thiserror::Error)]
pub enum MatchError {
    #[error("non-finite cost at (query {query}, target {target})")]
    NonFinite { query: usize, target: usize },
    #[error("{n_gt} ground-truth triplets exceed {n_q} queries")]
    TooManyTargets { n_gt: usize, n_q: usize },
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid ground truth: {0}")]
    InvalidTarget(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}

pub type Result<T> = std::result::Result<T, MatchError>;

// ── Ground truth ────────────────────────────────────────────────────────

/// One annotated human-object interaction: a human box, an object box
/// (center format, normalized to `[0, 1]`), the object class, and the HOI /
/// verb label sets (multi-label).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthTriplet {
    /// `[cx, cy, w, h]`, all in `[0, 1]`, `w, h > 0`.
    pub human_box: [Real; 4],
    pub object_box: [Real; 4],
    pub object_class: usize,
    pub hoi_labels: Vec<usize>,
    pub verb_labels: Vec<usize>,
}

impl GroundTruthTriplet {
    pub fn validate(&self, tax: &Taxonomy) -> Result<()> {
        for (name, b) in [("human", &self.human_box), ("object", &self.object_box)] {
            if b.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
                return Err(MatchError::InvalidTarget(format!(
                    "{name} box {b:?} outside [0,1]"
                )));
            }
            if b[2] <= 0.0 || b[3] <= 0.0 {
                return Err(MatchError::InvalidTarget(format!(
                    "{name} box {b:?} has non-positive size"
                )));
            }
        }
        if self.object_class >= tax.num_objects() {
            return Err(MatchError::InvalidTarget(format!(
                "object class {} out of 0..{}",
                self.object_class,
                tax.num_objects()
            )));
        }
        if self.hoi_labels.is_empty() {
            return Err(MatchError::InvalidTarget("empty HOI label set".into()));
        }
        for &n in &self.hoi_labels {
            if n >= tax.num_hois() {
                return Err(MatchError::InvalidTarget(format!(
                    "HOI label {n} out of 0..{}",
                    tax.num_hois()
                )));
            }
            if tax.hois[n].object != self.object_class {
                return Err(MatchError::InvalidTarget(format!(
                    "HOI label {n} pairs object {} but the triplet has object {}",
                    tax.hois[n].object, self.object_class
                )));
            }
        }
        for &k in &self.verb_labels {
            if k >= tax.num_verbs() {
                return Err(MatchError::InvalidTarget(format!(
                    "verb label {k} out of 0..{}",
                    tax.num_verbs()
                )));
            }
        }
        Ok(())
    }
}

// ── Cost matrix & Hungarian assignment ──────────────────────────────────

/// `[N_q × N_gt]` finite matching costs (queries in rows).
#[derive(Debug, Clone)]
pub struct CostMatrix {
    costs: Tensor,
}

impl CostMatrix {
    pub fn new(costs: Tensor) -> Result<Self> {
        if costs.rank() != 2 {
            return Err(MatchError::ShapeMismatch {
                op: "cost matrix",
                detail: format!("{:?} is not 2D", costs.shape()),
            });
        }
        let n_gt = costs.shape()[1];
        if let Some(i) = costs.data().iter().position(|v| !v.is_finite()) {
            return Err(MatchError::NonFinite {
                query: i / n_gt,
                target: i % n_gt,
            });
        }
        Ok(Self { costs })
    }

    pub fn costs(&self) -> &Tensor {
        &self.costs
    }

    pub fn num_queries(&self) -> usize {
        self.costs.shape()[0]
    }

    pub fn num_targets(&self) -> usize {
        self.costs.shape()[1]
    }

    fn at(&self, query: usize, target: usize) -> Real {
        self.costs.data()[query * self.num_targets() + target]
    }
}

/// Minimum-cost injective assignment of targets to queries.
///
/// Returns `assignment[t] = q`. Among all minimum-cost assignments the
/// lexicographically smallest query sequence is chosen (fix-and-verify with
/// tolerance 1e-9). The core solver is the O(n³) augmenting-path algorithm
/// with dual potentials.
pub fn hungarian(cost: &CostMatrix) -> Result<Vec<usize>> {
    let (n_q, n_gt) = (cost.num_queries(), cost.num_targets());
    if n_gt > n_q {
        return Err(MatchError::TooManyTargets { n_gt, n_q });
    }
    if n_gt == 0 {
        return Ok(Vec::new());
    }
    // Rows = targets (small side), columns = queries.
    let rows: Vec<Vec<Real>> = (0..n_gt)
        .map(|t| (0..n_q).map(|q| cost.at(q, t)).collect())
        .collect();
    let best_total = solve_rows(&rows, &(0..n_q).collect::<Vec<_>>());

    // Fix-and-verify: commit the smallest query for each target, in target
    // order, that still admits an optimal completion.
    const TIE_TOL: Real = 1e-9;
    let mut assignment = Vec::with_capacity(n_gt);
    let mut free: Vec<usize> = (0..n_q).collect();
    let mut fixed_cost = 0.0;
    for t in 0..n_gt {
        let mut chosen = None;
        for (slot, &q) in free.iter().enumerate() {
            let remainder = if t + 1 == n_gt {
                0.0
            } else {
                let cols: Vec<usize> = free
                    .iter()
                    .copied()
                    .filter(|&c| c != q)
                    .collect();
                solve_rows(&rows[t + 1..], &cols)
            };
            if fixed_cost + rows[t][q] + remainder <= best_total + TIE_TOL {
                chosen = Some((slot, q));
                break;
            }
        }
        let (slot, q) = chosen.expect("optimal assignment always admits a completion");
        fixed_cost += rows[t][q];
        free.remove(slot);
        assignment.push(q);
    }
    Ok(assignment)
}

/// Optimal total cost assigning every row to a distinct column drawn from
/// `cols` (augmenting-path algorithm with potentials, O(rows²·cols)).
fn solve_rows(rows: &[Vec<Real>], cols: &[usize]) -> Real {
    let n = rows.len();
    let m = cols.len();
    if n == 0 {
        return 0.0;
    }
    debug_assert!(n <= m);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut matched = vec![0usize; m + 1]; // column j (1-based) → row (1-based), 0 = free
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![Real::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = Real::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = rows[i0 - 1][cols[j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=m {
        if matched[j] != 0 {
            total += rows[matched[j] - 1][cols[j - 1]];
        }
    }
    total
}

// ── Matching cost ───────────────────────────────────────────────────────

/// Loss / matching-cost weights and behavior switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_box: Real,
    pub lambda_giou: Real,
    pub lambda_cls: Real,
    pub lambda_hoi: Real,
    /// Cross-entropy weight of the no-object class.
    pub eos_coef: Real,
    pub focal_alpha: Real,
    pub focal_gamma: Real,
    /// Re-run Hungarian matching per auxiliary layer instead of reusing the
    /// final layer's assignment.
    pub rematch_aux: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_box: 2.5,
            lambda_giou: 1.0,
            lambda_cls: 1.0,
            lambda_hoi: 1.0,
            eos_coef: 0.1,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            rematch_aux: false,
        }
    }
}

/// Final-layer prediction values entering the matching cost.
#[derive(Debug, Clone, Copy)]
pub struct PredictionSlice<'a> {
    /// `[N_q × 4]` human boxes (center format).
    pub b_h: &'a Tensor,
    /// `[N_q × 4]` object boxes.
    pub b_o: &'a Tensor,
    /// `[N_q × (K_o + 1)]` object probabilities (last column no-object).
    pub c_o: &'a Tensor,
    /// `[N_q × K_h]` fused HOI logits.
    pub s_t: &'a Tensor,
}

fn check_shape(t: &Tensor, rows: usize, cols: usize, what: &'static str) -> Result<()> {
    if t.shape() != [rows, cols] {
        return Err(MatchError::ShapeMismatch {
            op: what,
            detail: format!("{:?}, expected [{rows}, {cols}]", t.shape()),
        });
    }
    Ok(())
}

fn cxcywh_to_box(b: &[Real]) -> Result<EvalBox> {
    Ok(EvalBox::from_cxcywh(b[0], b[1], b[2], b[3])?)
}

/// Per-element focal cost of predicting logit `l` as positive minus the
/// cost of predicting it as negative (both in the stable log-sigmoid form
/// used by the focal loss itself).
fn focal_cost_term(l: Real, alpha: Real, gamma: Real) -> Real {
    let p = sigmoid_scalar(l);
    let pos = -alpha * (1.0 - p).powf(gamma) * log_sigmoid(l);
    let neg = -(1.0 - alpha) * p.powf(gamma) * log_sigmoid(-l);
    pos - neg
}

/// Builds the `[N_q × N_gt]` matching cost:
/// `λ_box·(L1_h + L1_o) + λ_giou·((1−GIoU_h) + (1−GIoU_o)) + λ_cls·(−C_o[m])
/// + λ_hoi·Σ_{HOI labels} focal-cost(S_t)`.
pub fn matching_cost(
    pred: &PredictionSlice,
    targets: &[GroundTruthTriplet],
    tax: &Taxonomy,
    weights: &LossWeights,
) -> Result<CostMatrix> {
    let n_q = pred.b_h.shape().first().copied().unwrap_or(0);
    check_shape(pred.b_h, n_q, 4, "matching_cost b_h")?;
    check_shape(pred.b_o, n_q, 4, "matching_cost b_o")?;
    check_shape(pred.c_o, n_q, tax.num_objects() + 1, "matching_cost c_o")?;
    check_shape(pred.s_t, n_q, tax.num_hois(), "matching_cost s_t")?;
    for t in targets {
        t.validate(tax)?;
    }
    if targets.is_empty() {
        return CostMatrix::new(Tensor::zeros(&[n_q, 0]));
    }

    let n_gt = targets.len();
    let mut costs = vec![0.0; n_q * n_gt];
    for q in 0..n_q {
        let bh = pred.b_h.row(q);
        let bo = pred.b_o.row(q);
        let pbh = cxcywh_to_box(bh)?;
        let pbo = cxcywh_to_box(bo)?;
        for (g, tgt) in targets.iter().enumerate() {
            let l1: Real = bh
                .iter()
                .zip(&tgt.human_box)
                .chain(bo.iter().zip(&tgt.object_box))
                .map(|(a, b)| (a - b).abs())
                .sum();
            let gh = eval::giou(&pbh, &cxcywh_to_box(&tgt.human_box)?)?;
            let go = eval::giou(&pbo, &cxcywh_to_box(&tgt.object_box)?)?;
            let giou_loss = (1.0 - gh) + (1.0 - go);
            let cls = -pred.c_o.row(q)[tgt.object_class];
            let hoi: Real = tgt
                .hoi_labels
                .iter()
                .map(|&n| focal_cost_term(pred.s_t.row(q)[n], weights.focal_alpha, weights.focal_gamma))
                .sum();
            costs[q * n_gt + g] = weights.lambda_box * l1
                + weights.lambda_giou * giou_loss
                + weights.lambda_cls * cls
                + weights.lambda_hoi * hoi;
        }
    }
    CostMatrix::new(Tensor::from_vec(vec![n_q, n_gt], costs)?)
}

// ── Losses ──────────────────────────────────────────────────────────────

/// Per-layer graph nodes entering the loss.
#[derive(Debug, Clone, Copy)]
pub struct LayerHeads {
    /// `[N_q × 4]` human boxes (post-sigmoid).
    pub b_h: TensorId,
    /// `[N_q × 4]` object boxes.
    pub b_o: TensorId,
    /// `[N_q × (K_o + 1)]` raw class logits.
    pub c_o_logits: TensorId,
    /// `[N_q × (K_o + 1)]` softmax probabilities of the same logits.
    pub c_o: TensorId,
    /// `[N_q × K_h]` fused HOI logits.
    pub s_t: TensorId,
}

/// Raw and weighted per-term values for one layer.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossTerms {
    pub l1: Real,
    pub giou: Real,
    pub ce: Real,
    pub focal: Real,
    pub weighted_box: Real,
    pub weighted_giou: Real,
    pub weighted_ce: Real,
    pub weighted_focal: Real,
    pub total: Real,
}

/// Loss values per layer plus the grand total.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub layers: Vec<LossTerms>,
    pub total: Real,
}

/// Differentiable GIoU per matched pair: `pred` and `tgt` are `[N × 4]`
/// center-format boxes; the result is `[N × 1]`.
fn giou_pairs_graph(g: &mut Graph, pred: TensorId, tgt: &Tensor) -> Result<TensorId> {
    let t = g.constant(tgt.clone());
    let corner = |g: &mut Graph, b: TensorId| -> Result<[TensorId; 4]> {
        let cx = g.slice(b, 1, 0, 1)?;
        let cy = g.slice(b, 1, 1, 1)?;
        let w = g.slice(b, 1, 2, 1)?;
        let h = g.slice(b, 1, 3, 1)?;
        let hw = g.scale(w, 0.5);
        let hh = g.scale(h, 0.5);
        let x1 = g.sub(cx, hw)?;
        let y1 = g.sub(cy, hh)?;
        let x2 = g.add(cx, hw)?;
        let y2 = g.add(cy, hh)?;
        Ok([x1, y1, x2, y2])
    };
    let [px1, py1, px2, py2] = corner(g, pred)?;
    let [tx1, ty1, tx2, ty2] = corner(g, t)?;

    let ix1 = g.maximum(px1, tx1)?;
    let iy1 = g.maximum(py1, ty1)?;
    let ix2 = g.minimum(px2, tx2)?;
    let iy2 = g.minimum(py2, ty2)?;
    let iw_raw = g.sub(ix2, ix1)?;
    let ih_raw = g.sub(iy2, iy1)?;
    let iw = g.relu(iw_raw);
    let ih = g.relu(ih_raw);
    let inter = g.mul(iw, ih)?;

    let pw = g.sub(px2, px1)?;
    let ph = g.sub(py2, py1)?;
    let tw = g.sub(tx2, tx1)?;
    let th = g.sub(ty2, ty1)?;
    let area_p = g.mul(pw, ph)?;
    let area_t = g.mul(tw, th)?;
    let sum_areas = g.add(area_p, area_t)?;
    let union = g.sub(sum_areas, inter)?;
    let iou = g.div(inter, union)?;

    let hx1 = g.minimum(px1, tx1)?;
    let hy1 = g.minimum(py1, ty1)?;
    let hx2 = g.maximum(px2, tx2)?;
    let hy2 = g.maximum(py2, ty2)?;
    let hw_ = g.sub(hx2, hx1)?;
    let hh_ = g.sub(hy2, hy1)?;
    let hull = g.mul(hw_, hh_)?;
    let excess = g.sub(hull, union)?;
    let penalty = g.div(excess, hull)?;
    Ok(g.sub(iou, penalty)?)
}

/// One-hot `[N_gt × N_q]` selection matrix gathering matched query rows.
fn selection_matrix(assignment: &[usize], n_q: usize) -> Tensor {
    let n = assignment.len();
    let mut sel = Tensor::zeros(&[n, n_q]);
    for (g, &q) in assignment.iter().enumerate() {
        sel.data_mut()[g * n_q + q] = 1.0;
    }
    sel
}

/// Computes the total training loss over all layers.
///
/// The assignment is derived from the **final** layer's values and reused
/// for auxiliary layers unless `weights.rematch_aux` is set. Unmatched
/// queries are supervised toward the no-object class (CE weight
/// `eos_coef`) and an all-zero HOI target row.
pub fn compute_losses(
    g: &mut Graph,
    layers: &[LayerHeads],
    targets: &[GroundTruthTriplet],
    tax: &Taxonomy,
    weights: &LossWeights,
) -> Result<(TensorId, LossBreakdown)> {
    let final_layer = layers.last().ok_or(MatchError::ShapeMismatch {
        op: "compute_losses",
        detail: "no layers supplied".into(),
    })?;
    let assign_for = |g: &Graph, layer: &LayerHeads| -> Result<Vec<usize>> {
        let slice = PredictionSlice {
            b_h: g.value(layer.b_h),
            b_o: g.value(layer.b_o),
            c_o: g.value(layer.c_o),
            s_t: g.value(layer.s_t),
        };
        hungarian(&matching_cost(&slice, targets, tax, weights)?)
    };
    let final_assignment = assign_for(g, final_layer)?;

    let mut breakdown = Vec::with_capacity(layers.len());
    let mut total: Option<TensorId> = None;
    for layer in layers {
        let assignment = if weights.rematch_aux {
            assign_for(g, layer)?
        } else {
            final_assignment.clone()
        };
        let (layer_total, terms) = layer_loss(g, layer, &assignment, targets, tax, weights)?;
        breakdown.push(terms);
        total = Some(match total {
            None => layer_total,
            Some(t) => g.add(t, layer_total)?,
        });
    }
    let total = total.expect("at least one layer");
    Ok((
        total,
        LossBreakdown {
            layers: breakdown,
            total: g.value(total).data()[0],
        },
    ))
}

/// Builds per-layer loss heads from model outputs: scores each layer's
/// interaction / verb features against fixed classifiers and fuses them
/// into the training logits `S_t`.
pub fn layer_heads_from_model(
    g: &mut Graph,
    outputs: &crate::model::ForwardOutputs,
    e_inter: &Tensor,
    e_v: &Tensor,
    alpha: Real,
    tax: &Taxonomy,
) -> crate::tensor::Result<Vec<LayerHeads>> {
    let mut heads = Vec::with_capacity(outputs.layers.len());
    for layer in &outputs.layers {
        let s_inter = crate::classifiers::cosine_scores_graph(g, layer.o_inter, e_inter)?;
        let s_v = crate::classifiers::cosine_scores_graph(g, layer.o_verb, e_v)?;
        let s_t = crate::classifiers::fuse_training_graph(g, s_inter, s_v, alpha, tax)?;
        heads.push(LayerHeads {
            b_h: layer.instance.b_h,
            b_o: layer.instance.b_o,
            c_o_logits: layer.instance.c_o_logits,
            c_o: layer.instance.c_o,
            s_t,
        });
    }
    Ok(heads)
}

fn layer_loss(
    g: &mut Graph,
    layer: &LayerHeads,
    assignment: &[usize],
    targets: &[GroundTruthTriplet],
    tax: &Taxonomy,
    weights: &LossWeights,
) -> Result<(TensorId, LossTerms)> {
    let n_q = g.value(layer.b_h).shape()[0];
    let n_m = targets.len();
    let norm = n_m.max(1) as Real;

    // Box terms over matched pairs.
    let (l1, giou_term) = if n_m == 0 {
        (g.constant(Tensor::scalar(0.0)), g.constant(Tensor::scalar(0.0)))
    } else {
        let sel = g.constant(selection_matrix(assignment, n_q));
        let tgt_h = Tensor::from_rows(&targets.iter().map(|t| t.human_box.to_vec()).collect::<Vec<_>>())?;
        let tgt_o = Tensor::from_rows(&targets.iter().map(|t| t.object_box.to_vec()).collect::<Vec<_>>())?;
        let matched_h = g.matmul(sel, layer.b_h)?;
        let matched_o = g.matmul(sel, layer.b_o)?;

        let th = g.constant(tgt_h.clone());
        let to = g.constant(tgt_o.clone());
        let dh = g.sub(matched_h, th)?;
        let dabs_h = g.abs(dh);
        let do_ = g.sub(matched_o, to)?;
        let dabs_o = g.abs(do_);
        let sum_h = g.sum_all(dabs_h);
        let sum_o = g.sum_all(dabs_o);
        let l1_sum = g.add(sum_h, sum_o)?;
        let l1 = g.scale(l1_sum, 1.0 / norm);

        let gh = giou_pairs_graph(g, matched_h, &tgt_h)?;
        let go = giou_pairs_graph(g, matched_o, &tgt_o)?;
        let gh_sum = g.sum_all(gh);
        let go_sum = g.sum_all(go);
        let g_sum = g.add(gh_sum, go_sum)?;
        // Σ(1 − GIoU) = 2·n_m − Σ GIoU, normalized by n_m.
        let neg = g.scale(g_sum, -1.0 / norm);
        let giou_term = g.add_scalar(neg, 2.0);
        (l1, giou_term)
    };

    // Object-class cross entropy over all queries.
    let no_object = tax.num_objects();
    let mut classes = vec![no_object; n_q];
    for (t, &q) in assignment.iter().enumerate() {
        classes[q] = targets[t].object_class;
    }
    let mut class_weights = vec![1.0; no_object + 1];
    class_weights[no_object] = weights.eos_coef;
    let ce_rows = g.cross_entropy_rows(layer.c_o_logits, &classes, Some(&class_weights))?;
    let ce_sum = g.sum_all(ce_rows);
    let weight_norm: Real = classes.iter().map(|&c| class_weights[c]).sum();
    let ce = g.scale(ce_sum, 1.0 / weight_norm);

    // HOI focal loss over all queries: matched rows get their multi-hot
    // label set, unmatched rows all zeros.
    let kh = tax.num_hois();
    let mut multihot = Tensor::zeros(&[n_q, kh]);
    for (t, &q) in assignment.iter().enumerate() {
        for &n in &targets[t].hoi_labels {
            multihot.data_mut()[q * kh + n] = 1.0;
        }
    }
    let focal_elems = g.focal_bce_with_logits(
        layer.s_t,
        &multihot,
        weights.focal_alpha,
        weights.focal_gamma,
    )?;
    let focal_sum = g.sum_all(focal_elems);
    let focal = g.scale(focal_sum, 1.0 / (kh as Real * norm));

    let wb = g.scale(l1, weights.lambda_box);
    let wg = g.scale(giou_term, weights.lambda_giou);
    let wc = g.scale(ce, weights.lambda_cls);
    let wf = g.scale(focal, weights.lambda_hoi);
    let s1 = g.add(wb, wg)?;
    let s2 = g.add(s1, wc)?;
    let total = g.add(s2, wf)?;

    let scalar = |g: &Graph, id: TensorId| g.value(id).data()[0];
    let terms = LossTerms {
        l1: scalar(g, l1),
        giou: scalar(g, giou_term),
        ce: scalar(g, ce),
        focal: scalar(g, focal),
        weighted_box: scalar(g, wb),
        weighted_giou: scalar(g, wg),
        weighted_ce: scalar(g, wc),
        weighted_focal: scalar(g, wf),
        total: scalar(g, total),
    };
    Ok((total, terms))
}
