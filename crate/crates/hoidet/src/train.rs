//! Full-batch toy trainer: builds a fresh graph per step, averages the
//! detection loss over all examples, and applies SGD or AdamW updates.
//! Every run is a pure function of (initial parameters, config, data).

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::Taxonomy;
use crate::matching_loss::{
    compute_losses, layer_heads_from_model, GroundTruthTriplet, LossTerms, LossWeights,
    MatchError,
};
use crate::model::{model_forward, ModelConfig};
use crate::params::{ParamError, ParamStore};
use crate::tensor::{Graph, Real, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("bad train config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    AdamW,
}

/// Trainer hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: Real,
    pub optimizer: OptimizerKind,
    pub weight_decay: Real,
    /// Clip the global gradient norm to this value when set.
    pub grad_clip: Option<Real>,
    /// Multiply the learning rate by 0.1 from this step onward.
    pub lr_drop: Option<usize>,
    /// Seeds per-step dropout draws.
    pub seed: u64,
    /// Verb-score fusion weight α.
    pub alpha: Real,
    pub loss_weights: LossWeights,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-3,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 1e-4,
            grad_clip: Some(1.0),
            lr_drop: None,
            seed: 0,
            alpha: 0.5,
            loss_weights: LossWeights::default(),
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(TrainError::BadConfig("steps must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::BadConfig(format!("learning rate {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::BadConfig(format!(
                "weight decay {}",
                self.weight_decay
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(TrainError::BadConfig(format!("grad clip {c}")));
            }
        }
        Ok(())
    }
}

/// One training image: feature tensors plus ground truth.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub image_id: String,
    pub v_d: Tensor,
    pub v_s: Tensor,
    pub targets: Vec<GroundTruthTriplet>,
}

/// Per-step log entry; `terms` averages the final-layer breakdown over the
/// batch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: Real,
    pub grad_norm: Real,
    pub terms: LossTerms,
}

fn mean_terms(per_image: &[LossTerms]) -> LossTerms {
    let n = per_image.len().max(1) as Real;
    let mut acc = LossTerms {
        l1: 0.0,
        giou: 0.0,
        ce: 0.0,
        focal: 0.0,
        weighted_box: 0.0,
        weighted_giou: 0.0,
        weighted_ce: 0.0,
        weighted_focal: 0.0,
        total: 0.0,
    };
    for t in per_image {
        acc.l1 += t.l1 / n;
        acc.giou += t.giou / n;
        acc.ce += t.ce / n;
        acc.focal += t.focal / n;
        acc.weighted_box += t.weighted_box / n;
        acc.weighted_giou += t.weighted_giou / n;
        acc.weighted_ce += t.weighted_ce / n;
        acc.weighted_focal += t.weighted_focal / n;
        acc.total += t.total / n;
    }
    acc
}

/// First-moment / second-moment state for one parameter.
struct AdamState {
    m: Vec<Real>,
    v: Vec<Real>,
}

const ADAM_BETA1: Real = 0.9;
const ADAM_BETA2: Real = 0.999;
const ADAM_EPS: Real = 1e-8;

/// Runs the full-batch loop, mutating `store` in place. `on_step` fires
/// every `log_every` steps and on the final step; all records are also
/// returned.
#[allow(clippy::too_many_arguments)]
pub fn train(
    store: &mut ParamStore,
    model_cfg: &ModelConfig,
    examples: &[TrainExample],
    e_inter: &Tensor,
    e_v: &Tensor,
    tax: &Taxonomy,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(TrainError::BadConfig("no training examples".into()));
    }
    let mut adam: BTreeMap<String, AdamState> = BTreeMap::new();
    let mut records = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut g = Graph::with_dropout_rng(ChaCha8Rng::seed_from_u64(
            cfg.seed.wrapping_add(step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ));
        let bound = store.bind_all(&mut g, true);

        let mut batch_total: Option<crate::tensor::TensorId> = None;
        let mut final_terms = Vec::with_capacity(examples.len());
        for ex in examples {
            let outputs = model_forward(&mut g, &bound, model_cfg, &ex.v_d, &ex.v_s)?;
            let heads = layer_heads_from_model(&mut g, &outputs, e_inter, e_v, cfg.alpha, tax)?;
            let (loss, breakdown) =
                compute_losses(&mut g, &heads, &ex.targets, tax, &cfg.loss_weights)?;
            final_terms.push(*breakdown.layers.last().expect("at least one layer"));
            batch_total = Some(match batch_total {
                None => loss,
                Some(t) => g.add(t, loss)?,
            });
        }
        let total = g.scale(batch_total.expect("non-empty batch"), 1.0 / examples.len() as Real);
        let loss_value = g.value(total).data()[0];
        let grads = g.backward(total)?;

        // Global gradient norm (and optional clipping factor).
        let mut sq_sum = 0.0;
        for (_, id) in bound.iter() {
            if let Some(gt) = grads.get(id) {
                sq_sum += gt.data().iter().map(|v| v * v).sum::<Real>();
            }
        }
        let grad_norm = sq_sum.sqrt();
        let clip_factor = match cfg.grad_clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };

        let lr = match cfg.lr_drop {
            Some(drop) if step >= drop => cfg.lr * 0.1,
            _ => cfg.lr,
        };
        let t_adam = (step + 1) as Real;
        for (name, id) in bound.iter() {
            let Some(grad) = grads.get(id) else { continue };
            let name = name.to_string();
            let param = store.get_mut(&name)?;
            match cfg.optimizer {
                OptimizerKind::Sgd => {
                    for (p, gv) in param.data_mut().iter_mut().zip(grad.data()) {
                        let gc = gv * clip_factor + cfg.weight_decay * *p;
                        *p -= lr * gc;
                    }
                }
                OptimizerKind::AdamW => {
                    let state = adam.entry(name).or_insert_with(|| AdamState {
                        m: vec![0.0; grad.numel()],
                        v: vec![0.0; grad.numel()],
                    });
                    let bias1 = 1.0 - ADAM_BETA1.powf(t_adam);
                    let bias2 = 1.0 - ADAM_BETA2.powf(t_adam);
                    for (i, (p, gv)) in
                        param.data_mut().iter_mut().zip(grad.data()).enumerate()
                    {
                        let gc = gv * clip_factor;
                        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * gc;
                        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * gc * gc;
                        let m_hat = state.m[i] / bias1;
                        let v_hat = state.v[i] / bias2;
                        *p -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS)
                            + cfg.weight_decay * *p);
                    }
                }
            }
        }

        let record = StepRecord {
            step,
            loss: loss_value,
            grad_norm,
            terms: mean_terms(&final_terms),
        };
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            on_step(&record);
        }
        records.push(record);
    }
    Ok(records)
}
