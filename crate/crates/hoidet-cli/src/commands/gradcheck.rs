//! `gradcheck` — verify analytic parameter gradients of the full model +
//! loss against central finite differences on a toy configuration.

use std::path::Path;

use hoidet::classifiers::{HoiCategory, Taxonomy};
use hoidet::matching_loss::{
    compute_losses, layer_heads_from_model, GroundTruthTriplet, LossWeights,
};
use hoidet::model::{init_model, model_forward, ModelConfig};
use hoidet::params::Bound;
use hoidet::tensor::{finite_diff_check, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::artifacts::write_summary;
use crate::config::RunConfig;
use crate::errors::{CliError, Ctx, Result};

/// Relative-error tolerance; the process fails when the check exceeds it.
const TOLERANCE: f64 = 1e-4;

#[derive(Serialize)]
struct Body {
    max_rel_err: f64,
    tolerance: f64,
    passed: bool,
    num_parameters: usize,
    /// `[tensor index, flat element index]` of the worst element.
    worst: [usize; 2],
}

fn toy_taxonomy() -> Taxonomy {
    let mut hois = Vec::new();
    for verb in 0..2 {
        for object in 0..2 {
            hois.push(HoiCategory {
                verb,
                object,
                count: 100,
            });
        }
    }
    Taxonomy::new(
        vec!["o0".into(), "o1".into()],
        vec!["v0".into(), "v1".into()],
        hois,
    )
    .expect("hand-built toy taxonomy is well-formed")
}

fn unit_rows(rows: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(&[rows, d], 1.0, rng);
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    t
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model_cfg = ModelConfig::toy(2);
    let tax = toy_taxonomy();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut store = init_model(&model_cfg, &mut rng).or_internal("model init")?;
    // Fresh-init ReLU pre-activations sit near the kink, where central
    // differences are unreliable; move every parameter to a generic point.
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in &names {
        let shape = store
            .get(name)
            .expect("name came from the store")
            .shape()
            .to_vec();
        *store.get_mut(name).expect("name came from the store") =
            Tensor::randn(&shape, 0.25, &mut rng);
    }

    let v_d = Tensor::randn(
        &[model_cfg.det_grid[0] * model_cfg.det_grid[1], model_cfg.inst_dim()],
        1.0,
        &mut rng,
    );
    let v_s = Tensor::randn(
        &[model_cfg.clip_grid[0] * model_cfg.clip_grid[1], model_cfg.inter_dim()],
        1.0,
        &mut rng,
    );
    let e_inter = unit_rows(tax.num_hois(), model_cfg.clip_dim, &mut rng);
    let e_v = unit_rows(tax.num_verbs(), model_cfg.clip_dim, &mut rng);
    let targets = vec![
        GroundTruthTriplet {
            human_box: [0.35, 0.4, 0.3, 0.3],
            object_box: [0.6, 0.55, 0.2, 0.25],
            object_class: 0,
            hoi_labels: vec![0],
            verb_labels: vec![0],
        },
        GroundTruthTriplet {
            human_box: [0.7, 0.3, 0.25, 0.35],
            object_box: [0.45, 0.65, 0.3, 0.2],
            object_class: 1,
            hoi_labels: vec![3],
            verb_labels: vec![1],
        },
    ];

    let inputs = store.ordered_tensors();
    let num_parameters: usize = inputs.iter().map(|t| t.data().len()).sum();
    let alpha = cfg.infer.alpha;
    let store_c = store.clone();
    let model_c = model_cfg.clone();
    let tax_c = tax.clone();
    let check = finite_diff_check(&inputs, 1e-5, move |g, ids| {
        let bound = Bound::from_ordered_ids(&store_c, ids);
        let out = model_forward(g, &bound, &model_c, &v_d, &v_s)?;
        let heads = layer_heads_from_model(g, &out, &e_inter, &e_v, alpha, &tax_c)?;
        let (total, _) = compute_losses(g, &heads, &targets, &tax_c, &LossWeights::default())
            .map_err(|e| hoidet::tensor::TensorError::Invalid {
                what: "compute_losses",
                detail: e.to_string(),
            })?;
        Ok(total)
    })
    .or_internal("finite-difference check")?;

    let passed = check.passes(TOLERANCE);
    println!("max rel-err {:.3e}", check.max_rel_err);
    write_summary(
        out,
        "gradcheck",
        &Body {
            max_rel_err: check.max_rel_err,
            tolerance: TOLERANCE,
            passed,
            num_parameters,
            worst: [check.worst.0, check.worst.1],
        },
    )?;
    if !passed {
        return Err(CliError::Internal(format!(
            "gradient check failed: max rel-err {:.3e} exceeds {TOLERANCE:.0e}",
            check.max_rel_err
        )));
    }
    Ok(())
}
