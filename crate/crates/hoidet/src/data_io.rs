//! Dataset fixtures: the synthetic scene/feature generator, on-disk layout,
//! and training-set subsampling.
//!
//! The generator plants recoverable structure: object and verb classes get
//! unit prototype vectors, HOI-region features are noisy normalized sums
//! `L2Norm(o_j + w_k + ε)`, object-region features `L2Norm(o_j + ε)`, text
//! fixtures are the noiseless versions, and the spatial token maps scatter
//! lifted region features onto grid cells covered by the annotated boxes.
//! Everything is a pure function of (config, seed).
//!
//! Directory layout:
//!
//! ```text
//! manifest.json
//! taxonomy.json
//! annotations/{split}.jsonl
//! features/{image_id}.{vs|vd|vg}.hctf
//! classifiers/*.hctf
//! splits/*.json
//! ```

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::{ClassifierError, HoiCategory, RegionFeatureStore, Taxonomy};
use crate::matching_loss::GroundTruthTriplet;
use crate::tensor::{hctf, Real, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("bad generator config: {0}")]
    BadConfig(String),
    #[error("fraction {0} outside (0, 1]")]
    BadFraction(Real),
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("missing file referenced by manifest: {path}")]
    Missing { path: String },
    #[error("invalid {what}: {detail}")]
    Invalid { what: String, detail: String },
    #[error("{path}: {source}")]
    Hctf {
        path: String,
        source: hctf::HctfError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path) -> impl FnOnce(serde_json::Error) -> DataError + '_ {
    move |e| DataError::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

// ── Config ──────────────────────────────────────────────────────────────

/// Synthetic-world generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_objects: usize,
    pub num_verbs: usize,
    /// HOI categories to draw; `None` keeps every (verb, object) pair.
    pub num_hois: Option<usize>,
    pub num_images: usize,
    pub max_instances_per_image: usize,
    /// CLIP-space feature dimension D.
    pub dim: usize,
    /// Instance-decoder token width C_e.
    pub inst_dim: usize,
    /// Interaction-decoder token width C_s.
    pub inter_dim: usize,
    pub det_grid: [usize; 2],
    pub clip_grid: [usize; 2],
    /// Feature noise scale σ.
    pub sigma: Real,
    pub seed: u64,
    /// Plant orthonormal geometry: object prototypes come in antipodal
    /// pairs `(u, −u)` over directions orthogonal to every verb prototype,
    /// so at σ = 0 the object components cancel exactly in the
    /// verb-classifier sum. Requires an even object count and
    /// `K_o/2 + K_v ≤ D`.
    pub antipodal_objects: bool,
    /// Gain on the positional component mixed into detection tokens.
    pub pos_gain: Real,
    /// Box side-length range `[lo, hi]` (normalized units).
    pub box_size: [Real; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_objects: 8,
            num_verbs: 6,
            num_hois: None,
            num_images: 24,
            max_instances_per_image: 2,
            dim: 32,
            inst_dim: 32,
            inter_dim: 32,
            det_grid: [7, 7],
            clip_grid: [7, 7],
            sigma: 0.05,
            seed: 0,
            antipodal_objects: true,
            pos_gain: 1.0,
            box_size: [0.15, 0.35],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DataError::BadConfig(msg));
        if self.num_objects == 0 || self.num_verbs == 0 {
            return fail("need at least one object and one verb class".into());
        }
        if self.dim < 4 {
            return fail(format!("feature dim {} < 4", self.dim));
        }
        if self.inst_dim % 4 != 0 || self.inst_dim == 0 {
            return fail(format!(
                "instance token width {} must be a positive multiple of 4",
                self.inst_dim
            ));
        }
        if self.inter_dim == 0 {
            return fail(format!("interaction token width {} must be positive", self.inter_dim));
        }
        if self.det_grid.iter().any(|&g| g == 0) || self.clip_grid.iter().any(|&g| g == 0) {
            return fail("token grids must be non-empty".into());
        }
        if self.max_instances_per_image == 0 {
            return fail("need at least one instance per image".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return fail(format!("noise scale {} invalid", self.sigma));
        }
        let [lo, hi] = self.box_size;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return fail(format!("box size range [{lo}, {hi}] outside 0 < lo ≤ hi < 1"));
        }
        if self.antipodal_objects {
            if self.num_objects % 2 != 0 {
                return fail(format!(
                    "antipodal prototypes need an even object count, got {}",
                    self.num_objects
                ));
            }
            let need = self.num_objects / 2 + self.num_verbs;
            if need > self.dim {
                return fail(format!(
                    "antipodal geometry needs {need} orthogonal directions but dim is {}",
                    self.dim
                ));
            }
        }
        if let Some(kh) = self.num_hois {
            let all = self.num_objects * self.num_verbs;
            if kh > all {
                return fail(format!("{kh} HOI categories exceed the {all} possible pairs"));
            }
            if kh < self.num_objects.max(self.num_verbs) {
                return fail(format!(
                    "{kh} HOI categories cannot cover {} objects and {} verbs",
                    self.num_objects, self.num_verbs
                ));
            }
        }
        Ok(())
    }

    /// Full-scale preset: 80 objects × 117 verbs, 600 HOI categories.
    /// Uses free random prototypes — the orthogonal planted geometry would
    /// need 157 independent directions.
    pub fn hico_scale() -> Self {
        Self {
            num_objects: 80,
            num_verbs: 117,
            num_hois: Some(600),
            antipodal_objects: false,
            ..Self::default()
        }
    }
}

// ── World ───────────────────────────────────────────────────────────────

/// One annotated interaction inside a scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneInstance {
    pub hoi: usize,
    /// `[cx, cy, w, h]` in `[0, 1]`.
    pub human_box: [Real; 4],
    pub object_box: [Real; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image_id: String,
    pub instances: Vec<SceneInstance>,
}

/// Per-image feature tensors consumed by the model.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// `[H_c·W_c × C_s]` interaction-decoder tokens.
    pub v_s: Tensor,
    /// `[H_d·W_d × C_e]` instance-decoder tokens.
    pub v_d: Tensor,
    /// `[D]` unit global image feature.
    pub v_g: Tensor,
}

/// Everything the generator produces, in memory.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub config: SynthConfig,
    pub taxonomy: Taxonomy,
    /// `[K_o × D]` unit rows.
    pub object_prototypes: Tensor,
    /// `[K_v × D]` unit rows.
    pub verb_prototypes: Tensor,
    /// `[D]` unit marker mixed into human-covered detection tokens.
    pub human_marker: Vec<Real>,
    pub scenes: Vec<Scene>,
    pub features: BTreeMap<String, FeatureBundle>,
    pub annotations: BTreeMap<String, Vec<GroundTruthTriplet>>,
    pub region_store: RegionFeatureStore,
    /// `[K_h × D]` text-embedding fixture `L2Norm(o_j + w_k)`.
    pub e_inter_fixture: Tensor,
    /// `[K_v × D]` per-verb sentence-embedding fixture (the prototypes).
    pub sentence_fixture: Tensor,
}

fn l2(v: &[Real]) -> Vec<Real> {
    let n = v.iter().map(|x| x * x).sum::<Real>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> Vec<Real> {
    l2(Tensor::randn(&[d], 1.0, rng).data())
}

/// `n` orthonormal vectors in `R^d` via Gram–Schmidt on Gaussian draws.
fn orthonormal_set(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Real>> {
    let mut basis: Vec<Vec<Real>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v = Tensor::randn(&[d], 1.0, rng).data().to_vec();
        for b in &basis {
            let proj: Real = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= proj * bi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<Real>().sqrt();
        if norm > 1e-6 {
            for vi in &mut v {
                *vi /= norm;
            }
            basis.push(v);
        }
    }
    basis
}

/// Samples HOI categories: all pairs, or `num_hois` distinct pairs that
/// cover every verb and every object.
fn sample_pairs(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let (kv, ko) = (cfg.num_verbs, cfg.num_objects);
    match cfg.num_hois {
        None => {
            let mut pairs = Vec::with_capacity(kv * ko);
            for k in 0..kv {
                for j in 0..ko {
                    pairs.push((k, j));
                }
            }
            pairs
        }
        Some(kh) => {
            let mut chosen: std::collections::BTreeSet<(usize, usize)> = Default::default();
            // Cover every verb with a random object, then every uncovered
            // object with a random verb.
            for k in 0..kv {
                chosen.insert((k, rng.gen_range(0..ko)));
            }
            let covered: std::collections::BTreeSet<usize> =
                chosen.iter().map(|&(_, j)| j).collect();
            for j in 0..ko {
                if !covered.contains(&j) {
                    chosen.insert((rng.gen_range(0..kv), j));
                }
            }
            // Fill the remainder from a shuffled pool of unused pairs.
            let mut pool: Vec<(usize, usize)> = (0..kv)
                .flat_map(|k| (0..ko).map(move |j| (k, j)))
                .filter(|p| !chosen.contains(p))
                .collect();
            pool.shuffle(rng);
            for p in pool {
                if chosen.len() >= kh {
                    break;
                }
                chosen.insert(p);
            }
            chosen.into_iter().collect()
        }
    }
}

fn random_box(size: [Real; 2], rng: &mut ChaCha8Rng) -> [Real; 4] {
    let draw = |rng: &mut ChaCha8Rng| {
        if size[0] < size[1] {
            rng.gen_range(size[0]..size[1])
        } else {
            size[0]
        }
    };
    let w = draw(rng);
    let h = draw(rng);
    let cx = rng.gen_range(w / 2.0..1.0 - w / 2.0);
    let cy = rng.gen_range(h / 2.0..1.0 - h / 2.0);
    [cx, cy, w, h]
}

fn box_covers(b: &[Real; 4], x: Real, y: Real) -> bool {
    (x - b[0]).abs() <= b[2] / 2.0 && (y - b[1]).abs() <= b[3] / 2.0
}

fn hull(a: &[Real; 4], b: &[Real; 4]) -> [Real; 4] {
    let x1 = (a[0] - a[2] / 2.0).min(b[0] - b[2] / 2.0);
    let y1 = (a[1] - a[3] / 2.0).min(b[1] - b[3] / 2.0);
    let x2 = (a[0] + a[2] / 2.0).max(b[0] + b[2] / 2.0);
    let y2 = (a[1] + a[3] / 2.0).max(b[1] + b[3] / 2.0);
    [(x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1]
}

/// Dense seeded lift matrix `[d_in × d_out]`, scaled `1/√d_in`.
fn lift_matrix(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[d_in, d_out], 1.0 / (d_in as Real).sqrt(), rng)
}

fn apply_lift(lift: &Tensor, v: &[Real]) -> Vec<Real> {
    let (d_in, d_out) = (lift.shape()[0], lift.shape()[1]);
    let mut out = vec![0.0; d_out];
    for (i, &x) in v.iter().enumerate().take(d_in) {
        for (o, l) in out.iter_mut().zip(&lift.data()[i * d_out..(i + 1) * d_out]) {
            *o += x * l;
        }
    }
    out
}

/// Generates the synthetic world: prototypes, taxonomy, scenes, region
/// features, token maps, global features, and text fixtures.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;

    // Prototypes.
    let mut obj_rows: Vec<Vec<Real>> = Vec::with_capacity(cfg.num_objects);
    let verb_rows: Vec<Vec<Real>>;
    if cfg.antipodal_objects {
        let n_dirs = cfg.num_objects / 2 + cfg.num_verbs;
        let mut dirs = orthonormal_set(n_dirs, d, &mut rng);
        verb_rows = dirs.split_off(cfg.num_objects / 2);
        for u in dirs {
            let neg = u.iter().map(|v| -v).collect();
            obj_rows.push(u);
            obj_rows.push(neg);
        }
    } else {
        for _ in 0..cfg.num_objects {
            obj_rows.push(random_unit(d, &mut rng));
        }
        verb_rows = (0..cfg.num_verbs).map(|_| random_unit(d, &mut rng)).collect();
    }
    let human_marker = random_unit(d, &mut rng);
    let lift_s = lift_matrix(d, cfg.inter_dim, &mut rng);
    let lift_d = lift_matrix(d, cfg.inst_dim, &mut rng);

    // Taxonomy (counts filled after scene generation).
    let pairs = sample_pairs(cfg, &mut rng);
    let mut hois: Vec<HoiCategory> = pairs
        .iter()
        .map(|&(k, j)| HoiCategory {
            verb: k,
            object: j,
            count: 0,
        })
        .collect();

    // Scenes and region features.
    let tax_dim_probe = hois.len();
    let mut scenes = Vec::with_capacity(cfg.num_images);
    let mut counts = vec![0u64; tax_dim_probe];
    for i in 0..cfg.num_images {
        let image_id = format!("img_{i:05}");
        let n_inst = rng.gen_range(1..=cfg.max_instances_per_image);
        let mut instances = Vec::with_capacity(n_inst);
        for _ in 0..n_inst {
            let hoi = rng.gen_range(0..tax_dim_probe);
            counts[hoi] += 1;
            instances.push(SceneInstance {
                hoi,
                human_box: random_box(cfg.box_size, &mut rng),
                object_box: random_box(cfg.box_size, &mut rng),
            });
        }
        scenes.push(Scene {
            image_id,
            instances,
        });
    }
    for (h, c) in hois.iter_mut().zip(&counts) {
        h.count = *c;
    }
    let taxonomy = Taxonomy::new(
        (0..cfg.num_objects).map(|j| format!("object_{j:03}")).collect(),
        (0..cfg.num_verbs).map(|k| format!("verb_{k:03}")).collect(),
        hois,
    )?;

    // Features per scene. The per-instance noise draws come after the scene
    // RNG stream above, all from the same seeded generator.
    let mut region_store = RegionFeatureStore::new(&taxonomy, d);
    let mut features = BTreeMap::new();
    let mut annotations = BTreeMap::new();
    for scene in &scenes {
        let mut hoi_feats: Vec<Vec<Real>> = Vec::new();
        let mut triplets = Vec::new();
        for inst in &scene.instances {
            let cat = taxonomy.hois[inst.hoi];
            let (k, j) = (cat.verb, cat.object);
            let noise = Tensor::randn(&[d], cfg.sigma, &mut rng);
            let raw: Vec<Real> = (0..d)
                .map(|i| obj_rows[j][i] + verb_rows[k][i] + noise.data()[i])
                .collect();
            let f_hoi = l2(&raw);
            let noise_o = Tensor::randn(&[d], cfg.sigma, &mut rng);
            let raw_o: Vec<Real> = (0..d).map(|i| obj_rows[j][i] + noise_o.data()[i]).collect();
            let f_obj = l2(&raw_o);
            region_store.add_hoi(inst.hoi, &f_hoi)?;
            region_store.add_object(j, &f_obj)?;
            hoi_feats.push(f_hoi);
            triplets.push(GroundTruthTriplet {
                human_box: inst.human_box,
                object_box: inst.object_box,
                object_class: j,
                hoi_labels: vec![inst.hoi],
                verb_labels: vec![k],
            });
        }

        // Global feature: normalized mean of the image's HOI features.
        let mut mean = vec![0.0; d];
        for f in &hoi_feats {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= hoi_feats.len() as Real;
        }
        let v_g = Tensor::from_vec(vec![d], l2(&mean))?;

        // Interaction tokens: lifted HOI features over the pair hull.
        let (ch, cw) = (cfg.clip_grid[0], cfg.clip_grid[1]);
        let mut v_s = Tensor::randn(&[ch * cw, cfg.inter_dim], cfg.sigma, &mut rng);
        for (inst, f_hoi) in scene.instances.iter().zip(&hoi_feats) {
            let region = hull(&inst.human_box, &inst.object_box);
            let lifted = apply_lift(&lift_s, f_hoi);
            for r in 0..ch {
                for c in 0..cw {
                    let (x, y) = ((c as Real + 0.5) / cw as Real, (r as Real + 0.5) / ch as Real);
                    if box_covers(&region, x, y) {
                        let row = &mut v_s.data_mut()
                            [(r * cw + c) * cfg.inter_dim..(r * cw + c + 1) * cfg.inter_dim];
                        for (t, l) in row.iter_mut().zip(&lifted) {
                            *t += l;
                        }
                    }
                }
            }
        }

        // Detection tokens: lifted class prototypes over each box plus a
        // positional component, so boxes are recoverable from content.
        let (dh, dw) = (cfg.det_grid[0], cfg.det_grid[1]);
        let pos = crate::attention::pos_encode_2d(dh, dw, cfg.inst_dim)?;
        let mut v_d = Tensor::randn(&[dh * dw, cfg.inst_dim], cfg.sigma, &mut rng);
        for t in 0..dh * dw {
            let row =
                &mut v_d.data_mut()[t * cfg.inst_dim..(t + 1) * cfg.inst_dim];
            for (v, p) in row.iter_mut().zip(pos.row(t)) {
                *v += cfg.pos_gain * p;
            }
        }
        let lifted_human = apply_lift(&lift_d, &human_marker);
        for inst in &scene.instances {
            let j = taxonomy.hois[inst.hoi].object;
            let lifted_obj = apply_lift(&lift_d, &obj_rows[j]);
            for r in 0..dh {
                for c in 0..dw {
                    let (x, y) = ((c as Real + 0.5) / dw as Real, (r as Real + 0.5) / dh as Real);
                    let row = &mut v_d.data_mut()
                        [(r * dw + c) * cfg.inst_dim..(r * dw + c + 1) * cfg.inst_dim];
                    if box_covers(&inst.human_box, x, y) {
                        for (t, l) in row.iter_mut().zip(&lifted_human) {
                            *t += l;
                        }
                    }
                    if box_covers(&inst.object_box, x, y) {
                        for (t, l) in row.iter_mut().zip(&lifted_obj) {
                            *t += l;
                        }
                    }
                }
            }
        }

        features.insert(scene.image_id.clone(), FeatureBundle { v_s, v_d, v_g });
        annotations.insert(scene.image_id.clone(), triplets);
    }

    // Text fixtures.
    let mut e_inter_rows = Vec::with_capacity(taxonomy.num_hois());
    for h in &taxonomy.hois {
        let raw: Vec<Real> = (0..d).map(|i| obj_rows[h.object][i] + verb_rows[h.verb][i]).collect();
        e_inter_rows.push(l2(&raw));
    }
    let e_inter_fixture = Tensor::from_rows(&e_inter_rows)?;
    let sentence_fixture = Tensor::from_rows(&verb_rows)?;

    Ok(SyntheticWorld {
        config: cfg.clone(),
        taxonomy,
        object_prototypes: Tensor::from_rows(&obj_rows)?,
        verb_prototypes: Tensor::from_rows(&verb_rows)?,
        human_marker,
        scenes,
        features,
        annotations,
        region_store,
        e_inter_fixture,
        sentence_fixture,
    })
}

// ── Manifest & persistence ──────────────────────────────────────────────

pub const MANIFEST_VERSION: u32 = 1;

/// Index of a stored dataset: generator config echo plus the image ids in
/// canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: SynthConfig,
    pub image_ids: Vec<String>,
}

/// One line of an annotations JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub triplets: Vec<GroundTruthTriplet>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(format_err(path))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(format_err(path))
}

/// Writes the full dataset under `dir` (created if missing).
pub fn save_dataset(world: &SyntheticWorld, dir: &Path) -> Result<()> {
    for sub in ["annotations", "features", "classifiers", "splits"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(io_err(dir))?;
    }
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        config: world.config.clone(),
        image_ids: world.scenes.iter().map(|s| s.image_id.clone()).collect(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(&dir.join("taxonomy.json"), &world.taxonomy)?;

    let ann_path = dir.join("annotations").join("train.jsonl");
    let mut out = Vec::new();
    for scene in &world.scenes {
        let record = AnnotationRecord {
            image_id: scene.image_id.clone(),
            triplets: world.annotations[&scene.image_id].clone(),
        };
        let line = serde_json::to_string(&record).map_err(format_err(&ann_path))?;
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    std::fs::write(&ann_path, out).map_err(io_err(&ann_path))?;

    let fdir = dir.join("features");
    for (id, bundle) in &world.features {
        for (suffix, tensor) in [("vs", &bundle.v_s), ("vd", &bundle.v_d), ("vg", &bundle.v_g)] {
            let path = fdir.join(format!("{id}.{suffix}.hctf"));
            hctf::write_file(&path, tensor, hctf::Dtype::F64).map_err(|source| DataError::Hctf {
                path: path.display().to_string(),
                source,
            })?;
        }
    }
    let cdir = dir.join("classifiers");
    let mut cls_files: Vec<(String, Tensor)> = vec![
        ("e_inter.hctf".into(), world.e_inter_fixture.clone()),
        ("sentence.hctf".into(), world.sentence_fixture.clone()),
    ];
    // Per-category region-feature bags, the raw material for the
    // arithmetic verb-classifier construction.
    for hoi in 0..world.taxonomy.num_hois() {
        if let Some(rows) = world.region_store.hoi_rows(hoi) {
            cls_files.push((format!("region.hoi.{hoi:04}.hctf"), rows));
        }
    }
    for object in 0..world.taxonomy.num_objects() {
        if let Some(rows) = world.region_store.object_rows(object) {
            cls_files.push((format!("region.obj.{object:04}.hctf"), rows));
        }
    }
    for (name, tensor) in &cls_files {
        let path = cdir.join(name);
        hctf::write_file(&path, tensor, hctf::Dtype::F64).map_err(|source| DataError::Hctf {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

/// A dataset loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub taxonomy: Taxonomy,
    pub annotations: BTreeMap<String, Vec<GroundTruthTriplet>>,
    pub e_inter_fixture: Tensor,
    pub sentence_fixture: Tensor,
    /// Region-feature bags, repopulated from the `classifiers/region.*`
    /// files; bag sizes always match the taxonomy instance counts.
    pub region_store: RegionFeatureStore,
}

impl LoadedDataset {
    /// Loads one image's feature bundle on demand.
    pub fn features(&self, image_id: &str) -> Result<FeatureBundle> {
        let read = |suffix: &str| -> Result<Tensor> {
            let path = self
                .root
                .join("features")
                .join(format!("{image_id}.{suffix}.hctf"));
            hctf::read_file(&path).map_err(|source| DataError::Hctf {
                path: path.display().to_string(),
                source,
            })
        };
        Ok(FeatureBundle {
            v_s: read("vs")?,
            v_d: read("vd")?,
            v_g: read("vg")?,
        })
    }
}

/// Loads and validates a dataset directory: schema, taxonomy consistency,
/// annotation labels, and referential integrity of feature files.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(DataError::Invalid {
            what: "manifest".into(),
            detail: format!(
                "format version {} unsupported (expected {MANIFEST_VERSION})",
                manifest.format_version
            ),
        });
    }
    let taxonomy: Taxonomy = read_json(&dir.join("taxonomy.json"))?;
    taxonomy.validate()?;

    let ann_path = dir.join("annotations").join("train.jsonl");
    let file = std::fs::File::open(&ann_path).map_err(io_err(&ann_path))?;
    let mut annotations = BTreeMap::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&ann_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| DataError::Format {
                path: ann_path.display().to_string(),
                detail: format!("line {}: {e}", lineno + 1),
            })?;
        for t in &record.triplets {
            t.validate(&taxonomy).map_err(|e| DataError::Invalid {
                what: format!("annotation for {}", record.image_id),
                detail: e.to_string(),
            })?;
        }
        annotations.insert(record.image_id, record.triplets);
    }

    for id in &manifest.image_ids {
        if !annotations.contains_key(id) {
            return Err(DataError::Invalid {
                what: "annotations".into(),
                detail: format!("image {id} listed in manifest but not annotated"),
            });
        }
        for suffix in ["vs", "vd", "vg"] {
            let path = dir.join("features").join(format!("{id}.{suffix}.hctf"));
            if !path.exists() {
                return Err(DataError::Missing {
                    path: path.display().to_string(),
                });
            }
        }
    }

    let read_cls = |name: &str| -> Result<Tensor> {
        let path = dir.join("classifiers").join(name);
        hctf::read_file(&path).map_err(|source| DataError::Hctf {
            path: path.display().to_string(),
            source,
        })
    };

    let region_store = load_region_store(dir, &manifest.config, &taxonomy)?;
    Ok(LoadedDataset {
        root: dir.to_path_buf(),
        manifest,
        taxonomy,
        annotations,
        e_inter_fixture: read_cls("e_inter.hctf")?,
        sentence_fixture: read_cls("sentence.hctf")?,
        region_store,
    })
}

/// Rebuilds the region-feature store from the `classifiers/region.*` files,
/// checking every bag against the taxonomy's instance counts.
fn load_region_store(
    dir: &Path,
    config: &SynthConfig,
    taxonomy: &Taxonomy,
) -> Result<RegionFeatureStore> {
    let mut store = RegionFeatureStore::new(taxonomy, config.dim);
    let mut object_expected = vec![0u64; taxonomy.num_objects()];
    for h in &taxonomy.hois {
        object_expected[h.object] += h.count;
    }
    for (hoi, h) in taxonomy.hois.iter().enumerate() {
        let path = dir.join("classifiers").join(format!("region.hoi.{hoi:04}.hctf"));
        if let Some(rows) = read_bag_file(&path, h.count, config.dim)? {
            for r in 0..rows.shape()[0] {
                store.add_hoi(hoi, rows.row(r))?;
            }
        }
    }
    for (object, &expected) in object_expected.iter().enumerate() {
        let path = dir.join("classifiers").join(format!("region.obj.{object:04}.hctf"));
        if let Some(rows) = read_bag_file(&path, expected, config.dim)? {
            for r in 0..rows.shape()[0] {
                store.add_object(object, rows.row(r))?;
            }
        }
    }
    Ok(store)
}

/// Reads one region-bag tensor, or `None` when no instances are expected.
fn read_bag_file(path: &Path, expected: u64, dim: usize) -> Result<Option<Tensor>> {
    if expected == 0 {
        return Ok(None);
    }
    if !path.exists() {
        return Err(DataError::Missing {
            path: path.display().to_string(),
        });
    }
    let rows = hctf::read_file(path).map_err(|source| DataError::Hctf {
        path: path.display().to_string(),
        source,
    })?;
    if rows.rank() != 2 || rows.shape()[0] as u64 != expected || rows.shape()[1] != dim {
        return Err(DataError::Invalid {
            what: format!("region bag {}", path.display()),
            detail: format!("shape {:?}, expected [{expected}, {dim}]", rows.shape()),
        });
    }
    Ok(Some(rows))
}

/// Writes a derived dataset that restricts `src` to exactly the images in
/// `manifest`. Feature files are copied byte for byte; the taxonomy, the
/// classifier fixtures, and the region bags carry over unchanged — they
/// describe the source corpus, which stays the statistical reference for
/// classifier construction and rare/non-rare bucketing.
pub fn save_manifest_subset(
    src: &LoadedDataset,
    manifest: &DatasetManifest,
    dst: &Path,
) -> Result<()> {
    if manifest.config != src.manifest.config {
        return Err(DataError::Invalid {
            what: "subset manifest".into(),
            detail: "configuration differs from the source dataset".into(),
        });
    }
    for id in &manifest.image_ids {
        if !src.annotations.contains_key(id) {
            return Err(DataError::Invalid {
                what: "subset manifest".into(),
                detail: format!("image {id} is not part of the source dataset"),
            });
        }
    }
    for sub in ["annotations", "features", "classifiers", "splits"] {
        std::fs::create_dir_all(dst.join(sub)).map_err(io_err(dst))?;
    }
    write_json(&dst.join("manifest.json"), manifest)?;
    write_json(&dst.join("taxonomy.json"), &src.taxonomy)?;

    let ann_path = dst.join("annotations").join("train.jsonl");
    let mut out = Vec::new();
    for id in &manifest.image_ids {
        let record = AnnotationRecord {
            image_id: id.clone(),
            triplets: src.annotations[id].clone(),
        };
        let line = serde_json::to_string(&record).map_err(format_err(&ann_path))?;
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    std::fs::write(&ann_path, out).map_err(io_err(&ann_path))?;

    for id in &manifest.image_ids {
        for suffix in ["vs", "vd", "vg"] {
            let name = format!("{id}.{suffix}.hctf");
            let from = src.root.join("features").join(&name);
            let to = dst.join("features").join(&name);
            std::fs::copy(&from, &to).map_err(io_err(&from))?;
        }
    }

    let src_cls = src.root.join("classifiers");
    let mut names: Vec<String> = std::fs::read_dir(&src_cls)
        .map_err(io_err(&src_cls))?
        .map(|entry| {
            entry
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .map_err(io_err(&src_cls))
        })
        .collect::<Result<_>>()?;
    names.sort();
    for name in names {
        let from = src_cls.join(&name);
        if from.is_file() {
            std::fs::copy(&from, dst.join("classifiers").join(&name)).map_err(io_err(&from))?;
        }
    }
    Ok(())
}

// ── Subsampling ─────────────────────────────────────────────────────────

/// Keeps a uniformly random `round(fraction·N)`-image subset, preserving
/// the manifest's image order. Subsets nest: for a fixed seed the subset
/// at a smaller fraction is contained in every larger one.
pub fn subsample_training(
    manifest: &DatasetManifest,
    fraction: Real,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::BadFraction(fraction));
    }
    let n = manifest.image_ids.len();
    let keep = ((fraction * n as Real).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut chosen: Vec<usize> = order.into_iter().take(keep).collect();
    chosen.sort_unstable();
    let image_ids = chosen
        .into_iter()
        .map(|i| manifest.image_ids[i].clone())
        .collect();
    Ok(DatasetManifest {
        format_version: manifest.format_version,
        config: manifest.config.clone(),
        image_ids,
    })
}

/// Writes a split spec as JSON under `splits/`.
pub fn save_split(dir: &Path, name: &str, split: &crate::eval::SplitSpec) -> Result<()> {
    let path = dir.join("splits").join(format!("{name}.json"));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(&path))?;
    }
    write_json(&path, split)
}

pub fn load_split(path: &Path) -> Result<crate::eval::SplitSpec> {
    read_json(path)
}
