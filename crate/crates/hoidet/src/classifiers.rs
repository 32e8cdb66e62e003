//! Verb / interaction classifiers and score fusion.
//!
//! The verb classifier is assembled by *visual semantic arithmetic*: average
//! HOI-region features, subtract averaged object-region features, normalize
//! (Eqs 11–14). Two ablation builders (sentence embeddings, HOI-average) are
//! provided. Scoring is cosine similarity against unit-row classifier
//! matrices; inference additionally mixes in a training-free zero-shot score
//! from the global image feature (Eq 17) and the object confidence (Eq 21).

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Real, Tensor, TensorError, TensorId};

#[derive(Debug, thiserror::Error)]
pub enum ClassifierError {
    #[error("verb {verb} has no usable region data (no HOI pair with both HOI and object instances)")]
    MissingVerbData { verb: usize },
    #[error("top-K {k} out of range 0..={max}")]
    KOutOfRange { k: usize, max: usize },
    #[error("HOI category {hoi} maps to unknown object class {object}")]
    UnknownMapping { hoi: usize, object: usize },
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ClassifierError>;

// ── Taxonomy ────────────────────────────────────────────────────────────

/// One HOI category: a (verb, object) pair plus its training-instance count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoiCategory {
    pub verb: usize,
    pub object: usize,
    pub count: u64,
}

/// Object classes, verb classes, and the HOI categories pairing them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Taxonomy {
    pub objects: Vec<String>,
    pub verbs: Vec<String>,
    pub hois: Vec<HoiCategory>,
}

/// Categories with fewer training instances than this are "rare".
pub const RARE_THRESHOLD: u64 = 10;

impl Taxonomy {
    pub fn new(objects: Vec<String>, verbs: Vec<String>, hois: Vec<HoiCategory>) -> Result<Self> {
        let tax = Self {
            objects,
            verbs,
            hois,
        };
        tax.validate()?;
        Ok(tax)
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.verbs.is_empty() || self.hois.is_empty() {
            return Err(ClassifierError::InvalidTaxonomy(
                "objects, verbs and HOI categories must be non-empty".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (n, h) in self.hois.iter().enumerate() {
            if h.verb >= self.verbs.len() {
                return Err(ClassifierError::InvalidTaxonomy(format!(
                    "HOI {n} references verb {} of {}",
                    h.verb,
                    self.verbs.len()
                )));
            }
            if h.object >= self.objects.len() {
                return Err(ClassifierError::InvalidTaxonomy(format!(
                    "HOI {n} references object {} of {}",
                    h.object,
                    self.objects.len()
                )));
            }
            if !seen.insert((h.verb, h.object)) {
                return Err(ClassifierError::InvalidTaxonomy(format!(
                    "duplicate HOI pair (verb {}, object {})",
                    h.verb, h.object
                )));
            }
        }
        Ok(())
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn num_verbs(&self) -> usize {
        self.verbs.len()
    }

    pub fn num_hois(&self) -> usize {
        self.hois.len()
    }

    pub fn hois_with_verb(&self, verb: usize) -> impl Iterator<Item = usize> + '_ {
        self.hois
            .iter()
            .enumerate()
            .filter(move |(_, h)| h.verb == verb)
            .map(|(n, _)| n)
    }

    pub fn hois_with_object(&self, object: usize) -> impl Iterator<Item = usize> + '_ {
        self.hois
            .iter()
            .enumerate()
            .filter(move |(_, h)| h.object == object)
            .map(|(n, _)| n)
    }

    /// Categories with fewer than [`RARE_THRESHOLD`] training instances.
    pub fn rare_categories(&self) -> Vec<usize> {
        (0..self.num_hois())
            .filter(|&n| self.hois[n].count < RARE_THRESHOLD)
            .collect()
    }

    /// `[K_v × K_h]` 0/1 matrix mapping verb scores onto HOI columns:
    /// column n is one-hot at the category's verb. Multiplying `S_v` by it
    /// expands `[N × K_v]` verb scores to `[N × K_h]`.
    pub fn verb_expansion_matrix(&self) -> Tensor {
        let (kv, kh) = (self.num_verbs(), self.num_hois());
        let mut m = Tensor::zeros(&[kv, kh]);
        for (n, h) in self.hois.iter().enumerate() {
            m.data_mut()[h.verb * kh + n] = 1.0;
        }
        m
    }

    /// Prompt text for one HOI category, stored for documentation and the
    /// synthetic text-fixture generator.
    pub fn template(&self, hoi: usize) -> String {
        let h = &self.hois[hoi];
        format!(
            "A photo of a person {} a {}",
            self.verbs[h.verb], self.objects[h.object]
        )
    }
}

// ── Region feature store ────────────────────────────────────────────────

/// Per-category bags of region features: HOI-region features keyed by HOI
/// category, object-region features keyed by object class. All rows have
/// dimension `dim`.
#[derive(Debug, Clone)]
pub struct RegionFeatureStore {
    dim: usize,
    hoi: Vec<Vec<Real>>,
    hoi_counts: Vec<usize>,
    obj: Vec<Vec<Real>>,
    obj_counts: Vec<usize>,
}

impl RegionFeatureStore {
    pub fn new(tax: &Taxonomy, dim: usize) -> Self {
        Self {
            dim,
            hoi: vec![Vec::new(); tax.num_hois()],
            hoi_counts: vec![0; tax.num_hois()],
            obj: vec![Vec::new(); tax.num_objects()],
            obj_counts: vec![0; tax.num_objects()],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn add_hoi(&mut self, hoi: usize, feature: &[Real]) -> Result<()> {
        self.check(feature, self.hoi.len(), hoi, "HOI")?;
        self.hoi[hoi].extend_from_slice(feature);
        self.hoi_counts[hoi] += 1;
        Ok(())
    }

    pub fn add_object(&mut self, object: usize, feature: &[Real]) -> Result<()> {
        self.check(feature, self.obj.len(), object, "object")?;
        self.obj[object].extend_from_slice(feature);
        self.obj_counts[object] += 1;
        Ok(())
    }

    fn check(&self, feature: &[Real], len: usize, idx: usize, what: &'static str) -> Result<()> {
        if idx >= len {
            return Err(ClassifierError::InvalidTaxonomy(format!(
                "{what} index {idx} out of range 0..{len}"
            )));
        }
        if feature.len() != self.dim {
            return Err(ClassifierError::ShapeMismatch {
                op: "region feature",
                detail: format!("length {} vs dim {}", feature.len(), self.dim),
            });
        }
        Ok(())
    }

    pub fn hoi_instances(&self, hoi: usize) -> usize {
        self.hoi_counts[hoi]
    }

    pub fn object_instances(&self, object: usize) -> usize {
        self.obj_counts[object]
    }

    /// One HOI bag as a `[count × dim]` tensor, `None` when empty.
    pub fn hoi_rows(&self, hoi: usize) -> Option<Tensor> {
        rows_tensor(&self.hoi[hoi], self.dim, self.hoi_counts[hoi])
    }

    /// One object bag as a `[count × dim]` tensor, `None` when empty.
    pub fn object_rows(&self, object: usize) -> Option<Tensor> {
        rows_tensor(&self.obj[object], self.dim, self.obj_counts[object])
    }

    /// Elementwise sum of all features in one HOI bag.
    fn hoi_sum(&self, hoi: usize) -> Option<Vec<Real>> {
        sum_rows(&self.hoi[hoi], self.dim, self.hoi_counts[hoi])
    }

    fn obj_sum(&self, object: usize) -> Option<Vec<Real>> {
        sum_rows(&self.obj[object], self.dim, self.obj_counts[object])
    }
}

fn rows_tensor(flat: &[Real], dim: usize, count: usize) -> Option<Tensor> {
    if count == 0 {
        return None;
    }
    Some(
        Tensor::from_vec(vec![count, dim], flat.to_vec())
            .expect("bag length is maintained as count × dim"),
    )
}

fn sum_rows(flat: &[Real], dim: usize, count: usize) -> Option<Vec<Real>> {
    if count == 0 {
        return None;
    }
    let mut out = vec![0.0; dim];
    for row in flat.chunks(dim) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Some(out)
}

fn l2norm_vec(v: &[Real], op: &'static str) -> Result<Vec<Real>> {
    let norm = v.iter().map(|x| x * x).sum::<Real>().sqrt();
    if norm < crate::tensor::ZERO_NORM_EPS {
        return Err(ClassifierError::Tensor(TensorError::ZeroNorm {
            op,
            index: 0,
            norm,
            eps: crate::tensor::ZERO_NORM_EPS,
        }));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

// ── Classifier bank ─────────────────────────────────────────────────────

/// Verb classifier `E_v`, interaction classifier `E_inter`, and the prompt
/// templates that generated the latter. Rows are unit-norm.
#[derive(Debug, Clone)]
pub struct ClassifierBank {
    pub e_v: Tensor,
    pub e_inter: Tensor,
    pub templates: Vec<String>,
}

impl ClassifierBank {
    pub fn new(e_v: Tensor, e_inter: Tensor, tax: &Taxonomy) -> Result<Self> {
        for (t, rows, what) in [
            (&e_v, tax.num_verbs(), "E_v"),
            (&e_inter, tax.num_hois(), "E_inter"),
        ] {
            if t.rank() != 2 || t.shape()[0] != rows {
                return Err(ClassifierError::ShapeMismatch {
                    op: "classifier bank",
                    detail: format!("{what} shape {:?}, expected [{rows}, D]", t.shape()),
                });
            }
            for (i, row) in t.iter_rows().enumerate() {
                let norm = row.iter().map(|v| v * v).sum::<Real>().sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(ClassifierError::ShapeMismatch {
                        op: "classifier bank",
                        detail: format!("{what} row {i} has norm {norm}, expected 1"),
                    });
                }
            }
        }
        let templates = (0..tax.num_hois()).map(|n| tax.template(n)).collect();
        Ok(Self {
            e_v,
            e_inter,
            templates,
        })
    }
}

// ── Verb-classifier builders ────────────────────────────────────────────

/// Visual semantic arithmetic (Eqs 11–14):
///
/// ```text
/// E_h^{k,j} = L2Norm(Σ f over HOI_(k,j))        — averaged HOI regions
/// E_o^j     = L2Norm(Σ f over OBJ_j)            — averaged object regions
/// E_v^k     = L2Norm(Σ_j (E_h^{k,j} − E_o^j))   — verb direction
/// ```
///
/// A pair (k, j) contributes only when both its HOI bag and object bag are
/// non-empty; a verb with no contributing pair is [`ClassifierError::MissingVerbData`].
pub fn build_verb_classifier(store: &RegionFeatureStore, tax: &Taxonomy) -> Result<Tensor> {
    let d = store.dim();
    let mut rows = Vec::with_capacity(tax.num_verbs() * d);
    for k in 0..tax.num_verbs() {
        let mut acc = vec![0.0; d];
        let mut used = 0;
        for n in tax.hois_with_verb(k) {
            let j = tax.hois[n].object;
            let (Some(hoi_sum), Some(obj_sum)) = (store.hoi_sum(n), store.obj_sum(j)) else {
                continue;
            };
            let e_h = l2norm_vec(&hoi_sum, "build_verb_classifier: E_h")?;
            let e_o = l2norm_vec(&obj_sum, "build_verb_classifier: E_o")?;
            for i in 0..d {
                acc[i] += e_h[i] - e_o[i];
            }
            used += 1;
        }
        if used == 0 {
            return Err(ClassifierError::MissingVerbData { verb: k });
        }
        rows.extend(l2norm_vec(&acc, "build_verb_classifier: E_v")?);
    }
    Ok(Tensor::from_vec(vec![tax.num_verbs(), d], rows)?)
}

/// Sentence-embedding baseline: rows are L2-normalized copies of the
/// fixture verb embeddings ("A photo of person doing …").
pub fn build_verb_classifier_sentence(verb_text_embeddings: &Tensor) -> Result<Tensor> {
    if verb_text_embeddings.rank() != 2 {
        return Err(ClassifierError::ShapeMismatch {
            op: "build_verb_classifier_sentence",
            detail: format!("{:?} is not 2D", verb_text_embeddings.shape()),
        });
    }
    normalize_rows(verb_text_embeddings)
}

/// HOI-average baseline: each verb row is the normalized mean of the
/// `E_inter` rows whose category carries that verb.
pub fn build_verb_classifier_hoi_average(e_inter: &Tensor, tax: &Taxonomy) -> Result<Tensor> {
    if e_inter.rank() != 2 || e_inter.shape()[0] != tax.num_hois() {
        return Err(ClassifierError::ShapeMismatch {
            op: "build_verb_classifier_hoi_average",
            detail: format!(
                "E_inter {:?}, expected [{}, D]",
                e_inter.shape(),
                tax.num_hois()
            ),
        });
    }
    let d = e_inter.shape()[1];
    let mut rows = Vec::with_capacity(tax.num_verbs() * d);
    for k in 0..tax.num_verbs() {
        let members: Vec<usize> = tax.hois_with_verb(k).collect();
        if members.is_empty() {
            return Err(ClassifierError::MissingVerbData { verb: k });
        }
        let mut acc = vec![0.0; d];
        for &n in &members {
            for (a, v) in acc.iter_mut().zip(e_inter.row(n)) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= members.len() as Real;
        }
        rows.extend(l2norm_vec(&acc, "build_verb_classifier_hoi_average")?);
    }
    Ok(Tensor::from_vec(vec![tax.num_verbs(), d], rows)?)
}

fn normalize_rows(t: &Tensor) -> Result<Tensor> {
    let d = t.shape()[1];
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<Real>().sqrt();
        if norm < crate::tensor::ZERO_NORM_EPS {
            return Err(ClassifierError::Tensor(TensorError::ZeroNorm {
                op: "normalize_rows",
                index: 0,
                norm,
                eps: crate::tensor::ZERO_NORM_EPS,
            }));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(out)
}

// ── Scoring (pure, inference path) ──────────────────────────────────────

fn cosine_scores(features: &Tensor, classifier: &Tensor, op: &'static str) -> Result<Tensor> {
    if features.rank() != 2 || classifier.rank() != 2 || features.shape()[1] != classifier.shape()[1]
    {
        return Err(ClassifierError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", features.shape(), classifier.shape()),
        });
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    let k = classifier.shape()[0];
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let f = features.row(i);
        for c in 0..k {
            let e = classifier.row(c);
            out[i * k + c] = f.iter().zip(e).map(|(a, b)| a * b).sum();
        }
    }
    let _ = d;
    Ok(Tensor::from_vec(vec![n, k], out)?)
}

/// `S_inter = O_inter · E_interᵀ` — cosine similarities, `[N_q × K_h]`.
pub fn score_inter(o_inter: &Tensor, e_inter: &Tensor) -> Result<Tensor> {
    cosine_scores(o_inter, e_inter, "score_inter")
}

/// `S_v = O_verb · E_vᵀ` — cosine similarities, `[N_q × K_v]`.
pub fn score_verb(o_verb: &Tensor, e_v: &Tensor) -> Result<Tensor> {
    cosine_scores(o_verb, e_v, "score_verb")
}

/// Expands `[N × K_v]` verb scores to `[N × K_h]` HOI columns by copying
/// each category's verb score.
pub fn expand_verb_scores(s_v: &Tensor, tax: &Taxonomy) -> Result<Tensor> {
    if s_v.rank() != 2 || s_v.shape()[1] != tax.num_verbs() {
        return Err(ClassifierError::ShapeMismatch {
            op: "expand_verb_scores",
            detail: format!("{:?}, expected [*, {}]", s_v.shape(), tax.num_verbs()),
        });
    }
    let n = s_v.shape()[0];
    let kh = tax.num_hois();
    let mut out = vec![0.0; n * kh];
    for i in 0..n {
        let row = s_v.row(i);
        for (c, h) in tax.hois.iter().enumerate() {
            out[i * kh + c] = row[h.verb];
        }
    }
    Ok(Tensor::from_vec(vec![n, kh], out)?)
}

/// Training-free zero-shot scores (Eq 17): similarities of the global image
/// feature against `E_inter`, keeping only the top `k` entries (ties break
/// toward the lower category index), zero elsewhere.
pub fn zero_shot_enhance(v_g: &Tensor, e_inter: &Tensor, k: usize) -> Result<Tensor> {
    let kh = e_inter.shape()[0];
    if v_g.rank() != 1 || v_g.numel() != e_inter.shape()[1] {
        return Err(ClassifierError::ShapeMismatch {
            op: "zero_shot_enhance",
            detail: format!("V_g {:?} vs E_inter {:?}", v_g.shape(), e_inter.shape()),
        });
    }
    if k > kh {
        return Err(ClassifierError::KOutOfRange { k, max: kh });
    }
    let mut sims = vec![0.0; kh];
    for c in 0..kh {
        sims[c] = e_inter.row(c).iter().zip(v_g.data()).map(|(a, b)| a * b).sum();
    }
    let mut order: Vec<usize> = (0..kh).collect();
    order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap());
    let mut out = vec![0.0; kh];
    for &c in order.iter().take(k) {
        out[c] = sims[c];
    }
    Ok(Tensor::from_vec(vec![kh], out)?)
}

/// Training-time fusion (Eq 19): `S_t = S_inter + α · S_v`.
pub fn fuse_training(s_inter: &Tensor, s_v_expanded: &Tensor, alpha: Real) -> Result<Tensor> {
    if s_inter.shape() != s_v_expanded.shape() {
        return Err(ClassifierError::ShapeMismatch {
            op: "fuse_training",
            detail: format!("{:?} vs {:?}", s_inter.shape(), s_v_expanded.shape()),
        });
    }
    let mut out = s_inter.clone();
    for (o, v) in out.data_mut().iter_mut().zip(s_v_expanded.data()) {
        *o += alpha * v;
    }
    Ok(out)
}

/// Inference fusion (Eq 20): `S_i = S_inter + α · S_v + S_zs`, the zero-shot
/// row broadcast over queries.
pub fn fuse_inference(
    s_inter: &Tensor,
    s_v_expanded: &Tensor,
    alpha: Real,
    s_zs: &Tensor,
) -> Result<Tensor> {
    let mut out = fuse_training(s_inter, s_v_expanded, alpha)?;
    let kh = out.shape()[1];
    if s_zs.rank() != 1 || s_zs.numel() != kh {
        return Err(ClassifierError::ShapeMismatch {
            op: "fuse_inference",
            detail: format!("S_zs {:?}, expected [{kh}]", s_zs.shape()),
        });
    }
    for row in out.data_mut().chunks_mut(kh) {
        for (o, z) in row.iter_mut().zip(s_zs.data()) {
            *o += z;
        }
    }
    Ok(out)
}

/// How the object confidence enters the final triplet score (Eq 21).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TripletScoreMode {
    /// `score = S_i + C_o²` — the equation exactly as the paper prints it.
    #[default]
    ObjectSquared,
    /// `score = S_i + C_o` — unsquared alternative.
    ObjectLinear,
}

/// Final per-(query, category) triplet scores (Eq 21): the fused score plus
/// the query's confidence for the category's object class.
pub fn triplet_score(
    s_i: &Tensor,
    c_o: &Tensor,
    tax: &Taxonomy,
    mode: TripletScoreMode,
) -> Result<Tensor> {
    let kh = tax.num_hois();
    if s_i.rank() != 2 || s_i.shape()[1] != kh {
        return Err(ClassifierError::ShapeMismatch {
            op: "triplet_score",
            detail: format!("S_i {:?}, expected [*, {kh}]", s_i.shape()),
        });
    }
    let n = s_i.shape()[0];
    if c_o.rank() != 2 || c_o.shape()[0] != n || c_o.shape()[1] < tax.num_objects() {
        return Err(ClassifierError::ShapeMismatch {
            op: "triplet_score",
            detail: format!(
                "C_o {:?}, expected [{n}, ≥{}]",
                c_o.shape(),
                tax.num_objects()
            ),
        });
    }
    let ko = c_o.shape()[1];
    let mut out = s_i.clone();
    for q in 0..n {
        for (c, h) in tax.hois.iter().enumerate() {
            if h.object >= tax.num_objects() {
                return Err(ClassifierError::UnknownMapping {
                    hoi: c,
                    object: h.object,
                });
            }
            let conf = c_o.data()[q * ko + h.object];
            let bump = match mode {
                TripletScoreMode::ObjectSquared => conf * conf,
                TripletScoreMode::ObjectLinear => conf,
            };
            out.data_mut()[q * kh + c] += bump;
        }
    }
    Ok(out)
}

// ── Full inference scoring pipeline ─────────────────────────────────────

/// Every intermediate of the inference scoring chain, kept for inspection.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    /// `[N_q × K_h]` interaction-representation scores.
    pub s_inter: Tensor,
    /// `[N_q × K_v]` verb-representation scores.
    pub s_v: Tensor,
    /// `[K_h]` training-free zero-shot scores (top-K kept).
    pub s_zs: Tensor,
    /// `[N_q × K_h]` training fusion `S_inter + α·S_v`.
    pub s_t: Tensor,
    /// `[N_q × K_h]` inference fusion `S_t + S_zs`.
    pub s_i: Tensor,
    /// `[N_q × K_h]` final triplet scores including object confidence.
    pub triplet: Tensor,
    pub alpha: Real,
    pub top_k: usize,
}

/// Runs the complete inference scoring chain for one image.
#[allow(clippy::too_many_arguments)]
pub fn score_pipeline(
    o_inter: &Tensor,
    o_verb: &Tensor,
    c_o: &Tensor,
    v_g: &Tensor,
    bank: &ClassifierBank,
    tax: &Taxonomy,
    alpha: Real,
    top_k: usize,
    mode: TripletScoreMode,
) -> Result<ScoreSet> {
    let s_inter = score_inter(o_inter, &bank.e_inter)?;
    let s_v = score_verb(o_verb, &bank.e_v)?;
    let s_v_expanded = expand_verb_scores(&s_v, tax)?;
    let s_zs = zero_shot_enhance(v_g, &bank.e_inter, top_k)?;
    let s_t = fuse_training(&s_inter, &s_v_expanded, alpha)?;
    let s_i = fuse_inference(&s_inter, &s_v_expanded, alpha, &s_zs)?;
    let triplet = triplet_score(&s_i, c_o, tax, mode)?;
    Ok(ScoreSet {
        s_inter,
        s_v,
        s_zs,
        s_t,
        s_i,
        triplet,
        alpha,
        top_k,
    })
}

/// The inference scoring chain with the zero-shot enhancement stage skipped
/// entirely: `S_zs` is identically zero and `S_i = S_t`. Keeping `K = 0` in
/// [`score_pipeline`] must agree with this path bit for bit.
pub fn score_pipeline_plain(
    o_inter: &Tensor,
    o_verb: &Tensor,
    c_o: &Tensor,
    bank: &ClassifierBank,
    tax: &Taxonomy,
    alpha: Real,
    mode: TripletScoreMode,
) -> Result<ScoreSet> {
    let s_inter = score_inter(o_inter, &bank.e_inter)?;
    let s_v = score_verb(o_verb, &bank.e_v)?;
    let s_v_expanded = expand_verb_scores(&s_v, tax)?;
    let s_t = fuse_training(&s_inter, &s_v_expanded, alpha)?;
    let s_i = s_t.clone();
    let triplet = triplet_score(&s_i, c_o, tax, mode)?;
    Ok(ScoreSet {
        s_inter,
        s_v,
        s_zs: Tensor::zeros(&[tax.num_hois()]),
        s_t,
        s_i,
        triplet,
        alpha,
        top_k: 0,
    })
}

// ── Scoring (in-graph, training path) ───────────────────────────────────

/// Differentiable `S_inter` / `S_v`: features (graph node) against a fixed
/// classifier matrix.
pub fn cosine_scores_graph(
    g: &mut Graph,
    features: TensorId,
    classifier: &Tensor,
) -> crate::tensor::Result<TensorId> {
    let cls = g.constant(classifier.clone());
    let cls_t = g.transpose(cls)?;
    g.matmul(features, cls_t)
}

/// Differentiable Eq 19: `S_t = S_inter + α · (S_v · M_expand)`.
pub fn fuse_training_graph(
    g: &mut Graph,
    s_inter: TensorId,
    s_v: TensorId,
    alpha: Real,
    tax: &Taxonomy,
) -> crate::tensor::Result<TensorId> {
    let expand = g.constant(tax.verb_expansion_matrix());
    let expanded = g.matmul(s_v, expand)?;
    let scaled = g.scale(expanded, alpha);
    g.add(s_inter, scaled)
}
