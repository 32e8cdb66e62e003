//! Multi-head attention and the knowledge-integration decoder layer.
//!
//! The interaction decoder refines queries against two token streams at
//! once: CLIP spatial features `V_s` and projected detection features
//! `V_d'`. One *shared* cross-attention parameter set attends to both
//! streams and the two branch outputs are summed before the feed-forward
//! block, so neither stream owns private projection weights.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::params::{init_layer_norm, init_linear, linear_forward, Bound, ParamStore};
use crate::tensor::{Graph, Real, Result, Tensor, TensorError, TensorId};

pub const LAYER_NORM_EPS: Real = 1e-5;

/// Shape of one decoder: model width, heads, FFN width, depth, dropout.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub num_layers: usize,
    pub dropout_rate: Real,
}

impl AttentionConfig {
    pub fn new(
        model_dim: usize,
        num_heads: usize,
        ffn_hidden: usize,
        num_layers: usize,
        dropout_rate: Real,
    ) -> Result<Self> {
        let cfg = Self {
            model_dim,
            num_heads,
            ffn_hidden,
            num_layers,
            dropout_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| TensorError::Invalid {
            what: "attention config",
            detail,
        };
        if self.model_dim == 0 || self.num_heads == 0 || self.ffn_hidden == 0 || self.num_layers == 0
        {
            return Err(bad("all dimensions must be positive".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(bad(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(bad(format!("dropout_rate {} outside [0,1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

// ── Multi-head attention ────────────────────────────────────────────────

/// Registers q/k/v/out projections under `prefix`.
pub fn init_mha(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> crate::params::Result<()> {
    for proj in ["q", "k", "v", "out"] {
        init_linear(store, &format!("{prefix}.{proj}"), dim, dim, rng)?;
    }
    Ok(())
}

/// Attention output plus per-head weight matrices (graph nodes, so they
/// stay differentiable and dumpable).
pub struct MhaOutput {
    pub output: TensorId,
    /// One `[N × M]` weight matrix per head.
    pub head_weights: Vec<TensorId>,
}

/// Scaled dot-product attention with `num_heads` heads.
///
/// Positional encodings follow the DETR convention: `query_pos` is added to
/// the query input and `key_pos` to the key input before their projections;
/// values are taken as-is.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    bound: &Bound,
    prefix: &str,
    cfg: &AttentionConfig,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    query_pos: Option<TensorId>,
    key_pos: Option<TensorId>,
) -> Result<MhaOutput> {
    let d = cfg.model_dim;
    for (name, id, rows_of) in [("q", q, "queries"), ("k", k, "keys"), ("v", v, "values")] {
        let s = g.value(id).shape();
        if s.len() != 2 || s[1] != d {
            return Err(TensorError::ShapeMismatch {
                op: "multi_head_attention",
                detail: format!("{name} ({rows_of}) has shape {s:?}, expected [*, {d}]"),
            });
        }
    }
    if g.value(k).shape()[0] != g.value(v).shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "multi_head_attention",
            detail: format!(
                "keys {:?} vs values {:?}",
                g.value(k).shape(),
                g.value(v).shape()
            ),
        });
    }

    let q_in = match query_pos {
        Some(p) => g.add(q, p)?,
        None => q,
    };
    let k_in = match key_pos {
        Some(p) => g.add(k, p)?,
        None => k,
    };

    let qp = linear_forward(g, bound, &format!("{prefix}.q"), q_in)?;
    let kp = linear_forward(g, bound, &format!("{prefix}.k"), k_in)?;
    let vp = linear_forward(g, bound, &format!("{prefix}.v"), v)?;

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as Real).sqrt();
    let mut head_outputs = Vec::with_capacity(cfg.num_heads);
    let mut head_weights = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = g.slice(qp, 1, h * dh, dh)?;
        let kh = g.slice(kp, 1, h * dh, dh)?;
        let vh = g.slice(vp, 1, h * dh, dh)?;
        let kht = g.transpose(kh)?;
        let scores = g.matmul(qh, kht)?;
        let scaled = g.scale(scores, scale);
        let weights = g.softmax(scaled, 1)?;
        let attended = g.matmul(weights, vh)?;
        head_outputs.push(attended);
        head_weights.push(weights);
    }
    let merged = g.concat(&head_outputs, 1)?;
    let output = linear_forward(g, bound, &format!("{prefix}.out"), merged)?;
    Ok(MhaOutput {
        output,
        head_weights,
    })
}

/// Stacks per-head `[N × M]` weights into one `[heads × N × M]` tensor.
pub fn stack_head_weights(g: &Graph, heads: &[TensorId]) -> Result<Tensor> {
    let tensors: Vec<Tensor> = heads.iter().map(|&h| g.tensor(h)).collect();
    Tensor::stack(&tensors)
}

// ── Knowledge-integration layer ─────────────────────────────────────────

/// Registers one decoder layer under `prefix`: self-attention, the single
/// shared cross-attention, FFN, and three layer norms.
pub fn init_ki_layer(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
    rng: &mut ChaCha8Rng,
) -> crate::params::Result<()> {
    init_mha(store, &format!("{prefix}.self"), cfg.model_dim, rng)?;
    init_mha(store, &format!("{prefix}.cross"), cfg.model_dim, rng)?;
    init_linear(
        store,
        &format!("{prefix}.ffn.fc1"),
        cfg.model_dim,
        cfg.ffn_hidden,
        rng,
    )?;
    init_linear(
        store,
        &format!("{prefix}.ffn.fc2"),
        cfg.ffn_hidden,
        cfg.model_dim,
        rng,
    )?;
    for ln in ["ln1", "ln2", "ln3"] {
        init_layer_norm(store, &format!("{prefix}.{ln}"), cfg.model_dim)?;
    }
    Ok(())
}

/// Intermediate signals of one knowledge-integration layer, kept for tests
/// and attention dumps.
pub struct KiDiagnostics {
    /// Branch attending to the CLIP spatial stream (post cross-attention).
    pub clip_branch: TensorId,
    /// Branch attending to the projected detection stream.
    pub det_branch: TensorId,
    /// Self-attention head weights.
    pub self_weights: Vec<TensorId>,
    /// Cross-attention head weights over the CLIP stream.
    pub clip_weights: Vec<TensorId>,
    /// Cross-attention head weights over the detection stream.
    pub det_weights: Vec<TensorId>,
}

/// Token streams a knowledge-integration layer attends to, with their
/// positional encodings.
#[derive(Clone, Copy)]
pub struct KiStreams {
    pub clip_tokens: TensorId,
    pub det_tokens: TensorId,
    /// Added to both token streams' keys (they share one spatial grid).
    pub key_pos: Option<TensorId>,
    /// Added to queries in self- and cross-attention.
    pub query_pos: Option<TensorId>,
}

fn layer_norm_forward(
    g: &mut Graph,
    bound: &Bound,
    prefix: &str,
    x: TensorId,
) -> Result<TensorId> {
    let gamma = bound
        .id(&format!("{prefix}.gamma"))
        .map_err(|e| TensorError::Invalid {
            what: "parameter binding",
            detail: e.to_string(),
        })?;
    let beta = bound
        .id(&format!("{prefix}.beta"))
        .map_err(|e| TensorError::Invalid {
            what: "parameter binding",
            detail: e.to_string(),
        })?;
    g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
}

/// One decoder layer (post-norm):
///
/// ```text
/// x1  = LN1(Q + SelfAttn(Q))
/// sum = CrossAttn(x1, V_s) + CrossAttn(x1, V_d')   // shared parameters
/// x2  = LN2(x1 + sum)
/// out = LN3(x2 + FFN(x2))
/// ```
pub fn knowledge_integration_forward(
    g: &mut Graph,
    bound: &Bound,
    prefix: &str,
    cfg: &AttentionConfig,
    queries: TensorId,
    streams: &KiStreams,
) -> Result<(TensorId, KiDiagnostics)> {
    let sq = g.value(queries).shape();
    let (sc, sd) = (
        g.value(streams.clip_tokens).shape(),
        g.value(streams.det_tokens).shape(),
    );
    if sc != sd {
        return Err(TensorError::ShapeMismatch {
            op: "knowledge_integration_forward",
            detail: format!("clip stream {sc:?} vs detection stream {sd:?}"),
        });
    }
    if sq.len() != 2 || sq[1] != cfg.model_dim {
        return Err(TensorError::ShapeMismatch {
            op: "knowledge_integration_forward",
            detail: format!("queries {sq:?}, expected [*, {}]", cfg.model_dim),
        });
    }

    // Self-attention over queries (query pos on both q and k).
    let self_out = multi_head_attention(
        g,
        bound,
        &format!("{prefix}.self"),
        cfg,
        queries,
        queries,
        queries,
        streams.query_pos,
        streams.query_pos,
    )?;
    let self_drop = g.dropout(self_out.output, cfg.dropout_rate)?;
    let res1 = g.add(queries, self_drop)?;
    let x1 = layer_norm_forward(g, bound, &format!("{prefix}.ln1"), res1)?;

    // Shared cross-attention applied to each stream.
    let cross_prefix = format!("{prefix}.cross");
    let clip = multi_head_attention(
        g,
        bound,
        &cross_prefix,
        cfg,
        x1,
        streams.clip_tokens,
        streams.clip_tokens,
        streams.query_pos,
        streams.key_pos,
    )?;
    let det = multi_head_attention(
        g,
        bound,
        &cross_prefix,
        cfg,
        x1,
        streams.det_tokens,
        streams.det_tokens,
        streams.query_pos,
        streams.key_pos,
    )?;
    let summed = g.add(clip.output, det.output)?;
    let cross_drop = g.dropout(summed, cfg.dropout_rate)?;
    let res2 = g.add(x1, cross_drop)?;
    let x2 = layer_norm_forward(g, bound, &format!("{prefix}.ln2"), res2)?;

    // Feed-forward block.
    let h = linear_forward(g, bound, &format!("{prefix}.ffn.fc1"), x2)?;
    let h = g.relu(h);
    let h = g.dropout(h, cfg.dropout_rate)?;
    let h = linear_forward(g, bound, &format!("{prefix}.ffn.fc2"), h)?;
    let ffn_drop = g.dropout(h, cfg.dropout_rate)?;
    let res3 = g.add(x2, ffn_drop)?;
    let out = layer_norm_forward(g, bound, &format!("{prefix}.ln3"), res3)?;

    Ok((
        out,
        KiDiagnostics {
            clip_branch: clip.output,
            det_branch: det.output,
            self_weights: self_out.head_weights,
            clip_weights: clip.head_weights,
            det_weights: det.head_weights,
        },
    ))
}

// ── Decoder stack ───────────────────────────────────────────────────────

/// Registers `cfg.num_layers` knowledge-integration layers under `prefix`.
pub fn init_decoder_stack(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
    rng: &mut ChaCha8Rng,
) -> crate::params::Result<()> {
    for layer in 0..cfg.num_layers {
        init_ki_layer(store, &format!("{prefix}.layer{layer}"), cfg, rng)?;
    }
    Ok(())
}

/// Runs the layer stack, returning every layer's output (the last entry is
/// the final decoder state) plus per-layer diagnostics.
pub fn decoder_stack_forward(
    g: &mut Graph,
    bound: &Bound,
    prefix: &str,
    cfg: &AttentionConfig,
    queries: TensorId,
    streams: &KiStreams,
) -> Result<(Vec<TensorId>, Vec<KiDiagnostics>)> {
    let mut outputs = Vec::with_capacity(cfg.num_layers);
    let mut diags = Vec::with_capacity(cfg.num_layers);
    let mut state = queries;
    for layer in 0..cfg.num_layers {
        let (out, diag) = knowledge_integration_forward(
            g,
            bound,
            &format!("{prefix}.layer{layer}"),
            cfg,
            state,
            streams,
        )?;
        outputs.push(out);
        diags.push(diag);
        state = out;
    }
    Ok((outputs, diags))
}

// ── Positional encoding ─────────────────────────────────────────────────

/// Sinusoidal 2D positional encoding for an `h × w` token grid, flattened
/// row-major to `[h·w × channels]`. The first half of the channels encodes
/// the x coordinate, the second half y; `channels` must be divisible by 4
/// so each coordinate gets full sin/cos pairs.
pub fn pos_encode_2d(h: usize, w: usize, channels: usize) -> Result<Tensor> {
    if h == 0 || w == 0 {
        return Err(TensorError::Invalid {
            what: "pos_encode_2d",
            detail: format!("empty grid {h}x{w}"),
        });
    }
    if channels % 4 != 0 || channels == 0 {
        return Err(TensorError::Invalid {
            what: "pos_encode_2d",
            detail: format!("channels {channels} not a positive multiple of 4"),
        });
    }
    let half = channels / 2;
    let pairs = half / 2;
    let temperature: Real = 10000.0;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut data = vec![0.0; h * w * channels];
    for y in 0..h {
        for x in 0..w {
            let row = (y * w + x) * channels;
            // Normalized coordinates in (0, 2π], DETR convention.
            let xn = (x as Real + 1.0) / w as Real * two_pi;
            let yn = (y as Real + 1.0) / h as Real * two_pi;
            for i in 0..pairs {
                let freq = temperature.powf(2.0 * i as Real / half as Real);
                data[row + 2 * i] = (xn / freq).sin();
                data[row + 2 * i + 1] = (xn / freq).cos();
                data[row + half + 2 * i] = (yn / freq).sin();
                data[row + half + 2 * i + 1] = (yn / freq).cos();
            }
        }
    }
    Tensor::from_vec(vec![h * w, channels], data)
}
