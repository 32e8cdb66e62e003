//! End-to-end forward pass: instance decoding, interaction-query
//! construction, knowledge-integration decoding, CLIP-space projection, and
//! the verb adapter.
//!
//! The instance decoder is a compact DETR-style stand-in built from the same
//! attention primitives; the interaction path is the contribution under
//! test. Both decoders run at equal depth so auxiliary supervision can pair
//! their layers one to one.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    decoder_stack_forward, init_decoder_stack, init_mha, multi_head_attention, pos_encode_2d,
    AttentionConfig, KiDiagnostics, KiStreams, LAYER_NORM_EPS,
};
use crate::params::{init_layer_norm, init_linear, linear_forward, Bound, ParamStore};
use crate::tensor::{Graph, Real, Result, Tensor, TensorError, TensorId};

// ── Configuration ───────────────────────────────────────────────────────

/// Dimensions and depths of the whole model.
///
/// `instance` runs at width `C_e`, `interaction` at width `C_s`; `clip_dim`
/// is the CLIP embedding width `D` that classifiers score against.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub clip_dim: usize,
    pub num_queries: usize,
    pub num_objects: usize,
    pub instance: AttentionConfig,
    pub interaction: AttentionConfig,
    /// CLIP spatial grid `[H_s, W_s]`; interaction streams live here.
    pub clip_grid: [usize; 2],
    /// Detection feature grid `[H_d, W_d]`; resampled to `clip_grid` for Eq-5
    /// projection when the grids differ.
    pub det_grid: [usize; 2],
}

impl ModelConfig {
    /// Instance-decoder width `C_e`.
    pub fn inst_dim(&self) -> usize {
        self.instance.model_dim
    }

    /// Interaction-decoder width `C_s`.
    pub fn inter_dim(&self) -> usize {
        self.interaction.model_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.instance.validate()?;
        self.interaction.validate()?;
        let bad = |detail: String| TensorError::Invalid {
            what: "model config",
            detail,
        };
        if self.clip_dim == 0 || self.num_queries == 0 || self.num_objects == 0 {
            return Err(bad("all dimensions must be positive".into()));
        }
        if self.instance.num_layers != self.interaction.num_layers {
            return Err(bad(format!(
                "instance depth {} != interaction depth {}; auxiliary supervision pairs layers",
                self.instance.num_layers, self.interaction.num_layers
            )));
        }
        if self.clip_grid.iter().chain(&self.det_grid).any(|&g| g == 0) {
            return Err(bad("grids must be positive".into()));
        }
        if self.inst_dim() % 4 != 0 || self.inter_dim() % 4 != 0 {
            return Err(bad(
                "decoder widths must be multiples of 4 for 2D positional encoding".into(),
            ));
        }
        Ok(())
    }

    /// Paper-shaped defaults: D=512, C_s=512, C_e=256, 64 queries, 3 layers.
    pub fn default_dims(num_objects: usize) -> Self {
        Self {
            clip_dim: 512,
            num_queries: 64,
            num_objects,
            instance: AttentionConfig {
                model_dim: 256,
                num_heads: 8,
                ffn_hidden: 1024,
                num_layers: 3,
                dropout_rate: 0.0,
            },
            interaction: AttentionConfig {
                model_dim: 512,
                num_heads: 8,
                ffn_hidden: 1024,
                num_layers: 3,
                dropout_rate: 0.0,
            },
            clip_grid: [7, 7],
            det_grid: [7, 7],
        }
    }

    /// Small configuration for tests: D=16, C_s=16, C_e=8, 4 queries, 2 layers.
    pub fn toy(num_objects: usize) -> Self {
        Self {
            clip_dim: 16,
            num_queries: 4,
            num_objects,
            instance: AttentionConfig {
                model_dim: 8,
                num_heads: 2,
                ffn_hidden: 16,
                num_layers: 2,
                dropout_rate: 0.0,
            },
            interaction: AttentionConfig {
                model_dim: 16,
                num_heads: 2,
                ffn_hidden: 32,
                num_layers: 2,
                dropout_rate: 0.0,
            },
            clip_grid: [3, 3],
            det_grid: [3, 3],
        }
    }
}

// ── Initialization ──────────────────────────────────────────────────────

/// Registers every model parameter. Weights are truncated-normal (std 0.02),
/// biases zero, query embeddings standard normal, layer-norm scales one.
pub fn init_model(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let (ce, cs, d) = (cfg.inst_dim(), cfg.inter_dim(), cfg.clip_dim);
    let nq = cfg.num_queries;
    let fail = |e: crate::params::ParamError| TensorError::Invalid {
        what: "model init",
        detail: e.to_string(),
    };

    (|| -> crate::params::Result<()> {
        // Learned query embeddings (used as query positional encodings).
        store.insert("query.h", Tensor::randn(&[nq, ce], 1.0, rng))?;
        store.insert("query.o", Tensor::randn(&[nq, ce], 1.0, rng))?;
        store.insert("inter.query_pos", Tensor::randn(&[nq, cs], 1.0, rng))?;

        // Instance decoder: plain decoder layers at width C_e.
        for layer in 0..cfg.instance.num_layers {
            let p = format!("inst.layer{layer}");
            init_mha(&mut store, &format!("{p}.self"), ce, rng)?;
            init_mha(&mut store, &format!("{p}.cross"), ce, rng)?;
            init_linear(&mut store, &format!("{p}.ffn.fc1"), ce, cfg.instance.ffn_hidden, rng)?;
            init_linear(&mut store, &format!("{p}.ffn.fc2"), cfg.instance.ffn_hidden, ce, rng)?;
            for ln in ["ln1", "ln2", "ln3"] {
                init_layer_norm(&mut store, &format!("{p}.{ln}"), ce)?;
            }
        }

        // Prediction heads, shared across layers.
        init_linear(&mut store, "head.box_h.fc1", ce, ce, rng)?;
        init_linear(&mut store, "head.box_h.fc2", ce, ce, rng)?;
        init_linear(&mut store, "head.box_h.fc3", ce, 4, rng)?;
        init_linear(&mut store, "head.box_o.fc1", ce, ce, rng)?;
        init_linear(&mut store, "head.box_o.fc2", ce, ce, rng)?;
        init_linear(&mut store, "head.box_o.fc3", ce, 4, rng)?;
        init_linear(&mut store, "head.class", ce, cfg.num_objects + 1, rng)?;

        // Interaction-query and detection-feature projections (Eqs 4–5).
        init_linear(&mut store, "proj_inter", ce, cs, rng)?;
        init_linear(&mut store, "proj_det", ce, cs, rng)?;

        // Interaction decoder (knowledge-integration layers).
        init_decoder_stack(&mut store, "inter", &cfg.interaction, rng)?;

        // CLIP-space projection (Eq 10) — no bias, CLIP convention.
        store.insert("clip_proj.w", Tensor::trunc_randn(&[cs, d], 0.02, rng))?;

        // Verb adapter: 3-layer MLP with hidden width D (Eq 15).
        init_linear(&mut store, "verb.fc1", cs, d, rng)?;
        init_linear(&mut store, "verb.fc2", d, d, rng)?;
        init_linear(&mut store, "verb.fc3", d, d, rng)?;
        Ok(())
    })()
    .map_err(fail)?;
    Ok(store)
}

// ── Instance decoder ────────────────────────────────────────────────────

/// One instance-decoder layer's predictions.
pub struct InstanceLayer {
    pub o_h: TensorId,
    pub o_o: TensorId,
    /// Human / object boxes, `[N_q × 4]`, sigmoided `(cx, cy, w, h)`.
    pub b_h: TensorId,
    pub b_o: TensorId,
    /// Object class logits `[N_q × (K_o + 1)]`; last column = no-object.
    pub c_o_logits: TensorId,
    /// Softmaxed object class probabilities.
    pub c_o: TensorId,
}

fn plain_layer_forward(
    g: &mut Graph,
    bound: &Bound,
    prefix: &str,
    cfg: &AttentionConfig,
    state: TensorId,
    query_pos: TensorId,
    tokens: TensorId,
    token_pos: TensorId,
) -> Result<TensorId> {
    let ln = |g: &mut Graph, name: &str, x: TensorId| -> Result<TensorId> {
        let gamma = bound.id(&format!("{prefix}.{name}.gamma")).map_err(bind_err)?;
        let beta = bound.id(&format!("{prefix}.{name}.beta")).map_err(bind_err)?;
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    };
    let self_out = multi_head_attention(
        g,
        bound,
        &format!("{prefix}.self"),
        cfg,
        state,
        state,
        state,
        Some(query_pos),
        Some(query_pos),
    )?;
    let self_drop = g.dropout(self_out.output, cfg.dropout_rate)?;
    let res1 = g.add(state, self_drop)?;
    let x1 = ln(g, "ln1", res1)?;

    let cross = multi_head_attention(
        g,
        bound,
        &format!("{prefix}.cross"),
        cfg,
        x1,
        tokens,
        tokens,
        Some(query_pos),
        Some(token_pos),
    )?;
    let cross_drop = g.dropout(cross.output, cfg.dropout_rate)?;
    let res2 = g.add(x1, cross_drop)?;
    let x2 = ln(g, "ln2", res2)?;

    let h = linear_forward(g, bound, &format!("{prefix}.ffn.fc1"), x2)?;
    let h = g.relu(h);
    let h = g.dropout(h, cfg.dropout_rate)?;
    let h = linear_forward(g, bound, &format!("{prefix}.ffn.fc2"), h)?;
    let ffn_drop = g.dropout(h, cfg.dropout_rate)?;
    let res3 = g.add(x2, ffn_drop)?;
    ln(g, "ln3", res3)
}

fn bind_err(e: crate::params::ParamError) -> TensorError {
    TensorError::Invalid {
        what: "parameter binding",
        detail: e.to_string(),
    }
}

fn box_head(g: &mut Graph, bound: &Bound, prefix: &str, x: TensorId) -> Result<TensorId> {
    let h = linear_forward(g, bound, &format!("{prefix}.fc1"), x)?;
    let h = g.relu(h);
    let h = linear_forward(g, bound, &format!("{prefix}.fc2"), h)?;
    let h = g.relu(h);
    let h = linear_forward(g, bound, &format!("{prefix}.fc3"), h)?;
    Ok(g.sigmoid(h))
}

/// Decodes `v_d` tokens (graph node, `[H_d·W_d × C_e]`) into per-layer
/// human/object features, boxes, and object-class scores.
pub fn instance_decode(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    v_d: TensorId,
) -> Result<Vec<InstanceLayer>> {
    let ce = cfg.inst_dim();
    let s = g.value(v_d).shape();
    let n_tokens = cfg.det_grid[0] * cfg.det_grid[1];
    if s.len() != 2 || s[0] != n_tokens || s[1] != ce {
        return Err(TensorError::ShapeMismatch {
            op: "instance_decode",
            detail: format!("V_d {s:?}, expected [{n_tokens}, {ce}]"),
        });
    }
    let nq = cfg.num_queries;
    let qh = bound.id("query.h").map_err(bind_err)?;
    let qo = bound.id("query.o").map_err(bind_err)?;
    let query_pos = g.concat(&[qh, qo], 0)?;
    let token_pos = g.constant(pos_encode_2d(cfg.det_grid[0], cfg.det_grid[1], ce)?);
    let mut state = g.constant(Tensor::zeros(&[2 * nq, ce]));

    let mut layers = Vec::with_capacity(cfg.instance.num_layers);
    for layer in 0..cfg.instance.num_layers {
        state = plain_layer_forward(
            g,
            bound,
            &format!("inst.layer{layer}"),
            &cfg.instance,
            state,
            query_pos,
            v_d,
            token_pos,
        )?;
        let o_h = g.slice(state, 0, 0, nq)?;
        let o_o = g.slice(state, 0, nq, nq)?;
        let b_h = box_head(g, bound, "head.box_h", o_h)?;
        let b_o = box_head(g, bound, "head.box_o", o_o)?;
        let c_o_logits = linear_forward(g, bound, "head.class", o_o)?;
        let c_o = g.softmax(c_o_logits, 1)?;
        layers.push(InstanceLayer {
            o_h,
            o_o,
            b_h,
            b_o,
            c_o_logits,
            c_o,
        });
    }
    Ok(layers)
}

// ── Interaction path ────────────────────────────────────────────────────

/// `Q_inter = ((O_h + O_o) / 2) · W_i + b_i` (Eq 4).
pub fn make_interaction_queries(
    g: &mut Graph,
    bound: &Bound,
    o_h: TensorId,
    o_o: TensorId,
) -> Result<TensorId> {
    if g.value(o_h).shape() != g.value(o_o).shape() {
        return Err(TensorError::ShapeMismatch {
            op: "make_interaction_queries",
            detail: format!("{:?} vs {:?}", g.value(o_h).shape(), g.value(o_o).shape()),
        });
    }
    let sum = g.add(o_h, o_o)?;
    let pooled = g.scale(sum, 0.5);
    linear_forward(g, bound, "proj_inter", pooled)
}

/// `V_d' = V_d · W_p + b_p` (Eq 5). Expects tokens already on the CLIP grid.
pub fn project_detection_features(
    g: &mut Graph,
    bound: &Bound,
    v_d_tokens: TensorId,
) -> Result<TensorId> {
    linear_forward(g, bound, "proj_det", v_d_tokens)
}

/// Interaction decoding: per-layer refined queries plus their CLIP-space
/// projections `O_inter = L2Norm(Proj(Q_inter))` (Eq 10).
pub struct InteractionOutputs {
    /// Refined `Q_inter` after each knowledge-integration layer.
    pub q_inter_layers: Vec<TensorId>,
    /// Row-normalized CLIP-space features per layer.
    pub o_inter_layers: Vec<TensorId>,
    pub diagnostics: Vec<KiDiagnostics>,
}

pub fn interaction_decode(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    q_inter: TensorId,
    v_s: TensorId,
    v_d_proj: TensorId,
) -> Result<InteractionOutputs> {
    let key_pos = g.constant(pos_encode_2d(
        cfg.clip_grid[0],
        cfg.clip_grid[1],
        cfg.inter_dim(),
    )?);
    let query_pos = bound.id("inter.query_pos").map_err(bind_err)?;
    let streams = KiStreams {
        clip_tokens: v_s,
        det_tokens: v_d_proj,
        key_pos: Some(key_pos),
        query_pos: Some(query_pos),
    };
    let (outs, diags) = decoder_stack_forward(g, bound, "inter", &cfg.interaction, q_inter, &streams)?;
    let proj = bound.id("clip_proj.w").map_err(bind_err)?;
    let mut o_inter_layers = Vec::with_capacity(outs.len());
    for &q in &outs {
        let projected = g.matmul(q, proj)?;
        o_inter_layers.push(g.l2_normalize(projected, 1)?);
    }
    Ok(InteractionOutputs {
        q_inter_layers: outs,
        o_inter_layers,
        diagnostics: diags,
    })
}

/// Verb adapter (Eq 15): 3-layer MLP then row normalization, so verb scores
/// are cosine similarities.
pub fn verb_adapter_forward(g: &mut Graph, bound: &Bound, q_inter: TensorId) -> Result<TensorId> {
    let h = linear_forward(g, bound, "verb.fc1", q_inter)?;
    let h = g.relu(h);
    let h = linear_forward(g, bound, "verb.fc2", h)?;
    let h = g.relu(h);
    let h = linear_forward(g, bound, "verb.fc3", h)?;
    g.l2_normalize(h, 1)
}

// ── Full forward ────────────────────────────────────────────────────────

/// Everything one image's forward pass produces at one (paired) layer depth.
pub struct LayerPredictions {
    pub instance: InstanceLayer,
    pub q_inter: TensorId,
    /// `[N_q × D]`, unit rows.
    pub o_inter: TensorId,
    /// `[N_q × D]`, unit rows.
    pub o_verb: TensorId,
}

pub struct ForwardOutputs {
    /// One entry per decoder layer; the last is the model's prediction.
    pub layers: Vec<LayerPredictions>,
    pub diagnostics: Vec<KiDiagnostics>,
}

impl ForwardOutputs {
    pub fn final_layer(&self) -> &LayerPredictions {
        self.layers.last().expect("at least one decoder layer")
    }
}

/// Runs the full pipeline on one image's feature tensors.
///
/// `v_d`: `[H_d·W_d × C_e]` detection tokens; `v_s`: `[H_s·W_s × C_s]` CLIP
/// spatial tokens. The detection map is bilinearly resampled onto the CLIP
/// grid for the Eq-5 projection when the grids differ.
pub fn model_forward(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    v_d: &Tensor,
    v_s: &Tensor,
) -> Result<ForwardOutputs> {
    let (hs, ws) = (cfg.clip_grid[0], cfg.clip_grid[1]);
    let s = v_s.shape();
    if s.len() != 2 || s[0] != hs * ws || s[1] != cfg.inter_dim() {
        return Err(TensorError::ShapeMismatch {
            op: "model_forward",
            detail: format!("V_s {s:?}, expected [{}, {}]", hs * ws, cfg.inter_dim()),
        });
    }
    let v_d_id = g.constant(v_d.clone());
    let v_s_id = g.constant(v_s.clone());

    let instance_layers = instance_decode(g, bound, cfg, v_d_id)?;

    // Detection tokens on the CLIP grid for the interaction streams.
    let v_d_grid = if cfg.det_grid == cfg.clip_grid {
        v_d_id
    } else {
        let resampled = bilinear_resample(v_d, cfg.det_grid, cfg.clip_grid)?;
        g.constant(resampled)
    };
    let v_d_proj = project_detection_features(g, bound, v_d_grid)?;

    let last = instance_layers.last().expect("depth >= 1");
    let q0 = make_interaction_queries(g, bound, last.o_h, last.o_o)?;
    let inter = interaction_decode(g, bound, cfg, q0, v_s_id, v_d_proj)?;

    let mut layers = Vec::with_capacity(instance_layers.len());
    for (idx, inst) in instance_layers.into_iter().enumerate() {
        let q_inter = inter.q_inter_layers[idx];
        let o_inter = inter.o_inter_layers[idx];
        let o_verb = verb_adapter_forward(g, bound, q_inter)?;
        layers.push(LayerPredictions {
            instance: inst,
            q_inter,
            o_inter,
            o_verb,
        });
    }
    Ok(ForwardOutputs {
        layers,
        diagnostics: inter.diagnostics,
    })
}

// ── Checkpoints ─────────────────────────────────────────────────────────

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Param(#[from] crate::params::ParamError),
    #[error("checkpoint config: {0}")]
    Config(String),
}

/// Saves parameters plus the config into a checkpoint directory.
pub fn save_params(
    store: &ParamStore,
    cfg: &ModelConfig,
    dir: &std::path::Path,
) -> std::result::Result<(), CheckpointError> {
    let config =
        serde_json::to_value(cfg).map_err(|e| CheckpointError::Config(e.to_string()))?;
    store.save(dir, &config)?;
    Ok(())
}

/// Loads a checkpoint directory back into a store + config.
pub fn load_params(
    dir: &std::path::Path,
) -> std::result::Result<(ParamStore, ModelConfig), CheckpointError> {
    let (store, config) = ParamStore::load(dir)?;
    let cfg: ModelConfig =
        serde_json::from_value(config).map_err(|e| CheckpointError::Config(e.to_string()))?;
    cfg.validate()
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    Ok((store, cfg))
}

// ── Resampling ──────────────────────────────────────────────────────────

/// Bilinearly resamples a `[h·w × c]` token map onto a new grid
/// (align-corners convention; identity when the grids match).
pub fn bilinear_resample(t: &Tensor, from: [usize; 2], to: [usize; 2]) -> Result<Tensor> {
    let (h, w) = (from[0], from[1]);
    let (h2, w2) = (to[0], to[1]);
    let s = t.shape();
    if s.len() != 2 || s[0] != h * w {
        return Err(TensorError::ShapeMismatch {
            op: "bilinear_resample",
            detail: format!("{s:?} vs grid {h}x{w}"),
        });
    }
    if from == to {
        return Ok(t.clone());
    }
    let c = s[1];
    let src_coord = |dst: usize, n_dst: usize, n_src: usize| -> Real {
        if n_dst == 1 {
            0.0
        } else {
            dst as Real * (n_src - 1) as Real / (n_dst - 1) as Real
        }
    };
    let mut out = vec![0.0; h2 * w2 * c];
    for y in 0..h2 {
        let fy = src_coord(y, h2, h);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as Real;
        for x in 0..w2 {
            let fx = src_coord(x, w2, w);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as Real;
            let dst = (y * w2 + x) * c;
            for ch in 0..c {
                let v00 = t.data()[(y0 * w + x0) * c + ch];
                let v01 = t.data()[(y0 * w + x1) * c + ch];
                let v10 = t.data()[(y1 * w + x0) * c + ch];
                let v11 = t.data()[(y1 * w + x1) * c + ch];
                let top = v00 + (v01 - v00) * dx;
                let bot = v10 + (v11 - v10) * dx;
                out[dst + ch] = top + (bot - top) * dy;
            }
        }
    }
    Tensor::from_vec(vec![h2 * w2, c], out)
}
