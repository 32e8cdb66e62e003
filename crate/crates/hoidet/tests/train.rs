//! Trainer and inference pipeline tests: loss descent on synthetic scenes,
//! bitwise run-to-run determinism, and end-to-end evaluation wiring.

use hoidet::classifiers::{build_verb_classifier, ClassifierBank};
use hoidet::data_io::{generate_synthetic, SynthConfig, SyntheticWorld};
use hoidet::eval::{compute_map, ApInterpolation, Box, EvalItem, GroundTruthBox};
use hoidet::infer::{infer_image, InferConfig};
use hoidet::model::{init_model, ModelConfig};
use hoidet::params::ParamStore;
use hoidet::tensor::Real;
use hoidet::train::{train, OptimizerKind, TrainConfig, TrainError, TrainExample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn world_config() -> SynthConfig {
    SynthConfig {
        num_objects: 4,
        num_verbs: 3,
        num_images: 12,
        max_instances_per_image: 1,
        dim: 16,
        inst_dim: 8,
        inter_dim: 16,
        det_grid: [3, 3],
        clip_grid: [3, 3],
        sigma: 0.02,
        seed: 5,
        box_size: [0.3, 0.5],
        ..SynthConfig::default()
    }
}

fn model_config() -> ModelConfig {
    ModelConfig::toy(4)
}

fn examples_of(world: &SyntheticWorld) -> Vec<TrainExample> {
    world
        .scenes
        .iter()
        .map(|s| {
            let b = &world.features[&s.image_id];
            TrainExample {
                image_id: s.image_id.clone(),
                v_d: b.v_d.clone(),
                v_s: b.v_s.clone(),
                targets: world.annotations[&s.image_id].clone(),
            }
        })
        .collect()
}

fn setup() -> (SyntheticWorld, Vec<TrainExample>, ClassifierBank, ParamStore) {
    let world = generate_synthetic(&world_config()).unwrap();
    let examples = examples_of(&world);
    let e_v = build_verb_classifier(&world.region_store, &world.taxonomy).unwrap();
    let bank = ClassifierBank::new(e_v, world.e_inter_fixture.clone(), &world.taxonomy).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let store = init_model(&model_config(), &mut rng).unwrap();
    (world, examples, bank, store)
}

#[test]
fn training_shrinks_the_loss_substantially() {
    let (world, examples, bank, mut store) = setup();
    let cfg = TrainConfig {
        steps: 150,
        lr: 1e-2,
        log_every: 0,
        ..TrainConfig::default()
    };
    let records = train(
        &mut store,
        &model_config(),
        &examples,
        &bank.e_inter,
        &bank.e_v,
        &world.taxonomy,
        &cfg,
        |_| {},
    )
    .unwrap();
    assert_eq!(records.len(), 150);
    let first = records.first().unwrap().loss;
    let last = records.last().unwrap().loss;
    assert!(last.is_finite() && first.is_finite());
    assert!(
        last < 0.6 * first,
        "loss {first} → {last}, wanted at least a 40% drop"
    );
    // The logged steps count up and carry finite gradient norms.
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.step, i);
        assert!(r.grad_norm.is_finite() && r.grad_norm >= 0.0);
        assert!(r.terms.total.is_finite());
    }
}

#[test]
fn identical_seeds_train_to_bitwise_identical_parameters() {
    let run = || {
        let (world, examples, bank, mut store) = setup();
        let cfg = TrainConfig {
            steps: 8,
            log_every: 0,
            ..TrainConfig::default()
        };
        let records = train(
            &mut store,
            &model_config(),
            &examples,
            &bank.e_inter,
            &bank.e_v,
            &world.taxonomy,
            &cfg,
            |_| {},
        )
        .unwrap();
        (records, store)
    };
    let (r1, s1) = run();
    let (r2, s2) = run();
    for (a, b) in r1.iter().zip(&r2) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "step {}", a.step);
        assert_eq!(a.grad_norm.to_bits(), b.grad_norm.to_bits());
    }
    for (name, t1) in s1.iter() {
        let t2 = s2.get(name).unwrap();
        assert_eq!(t1.data(), t2.data(), "parameter {name} diverged");
    }
}

#[test]
fn sgd_also_descends() {
    let (world, examples, bank, mut store) = setup();
    let cfg = TrainConfig {
        steps: 20,
        lr: 5e-3,
        optimizer: OptimizerKind::Sgd,
        log_every: 0,
        ..TrainConfig::default()
    };
    let records = train(
        &mut store,
        &model_config(),
        &examples,
        &bank.e_inter,
        &bank.e_v,
        &world.taxonomy,
        &cfg,
        |_| {},
    )
    .unwrap();
    assert!(records.last().unwrap().loss < records.first().unwrap().loss);
}

#[test]
fn bad_train_configs_are_rejected() {
    let (world, examples, bank, mut store) = setup();
    for cfg in [
        TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            grad_clip: Some(0.0),
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(
            train(
                &mut store,
                &model_config(),
                &examples,
                &bank.e_inter,
                &bank.e_v,
                &world.taxonomy,
                &cfg,
                |_| {},
            ),
            Err(TrainError::BadConfig(_))
        ));
    }
    // Empty example set.
    assert!(matches!(
        train(
            &mut store,
            &model_config(),
            &[],
            &bank.e_inter,
            &bank.e_v,
            &world.taxonomy,
            &TrainConfig::default(),
            |_| {},
        ),
        Err(TrainError::BadConfig(_))
    ));
}

#[test]
fn log_callback_fires_on_schedule() {
    let (world, examples, bank, mut store) = setup();
    let cfg = TrainConfig {
        steps: 10,
        log_every: 4,
        ..TrainConfig::default()
    };
    let mut seen = Vec::new();
    train(
        &mut store,
        &model_config(),
        &examples,
        &bank.e_inter,
        &bank.e_v,
        &world.taxonomy,
        &cfg,
        |r| seen.push(r.step),
    )
    .unwrap();
    assert_eq!(seen, vec![0, 4, 8, 9]);
}

// ── Inference wiring ────────────────────────────────────────────────────

fn eval_items(
    world: &SyntheticWorld,
    store: &ParamStore,
    bank: &ClassifierBank,
    infer_cfg: &InferConfig,
) -> Vec<EvalItem> {
    world
        .scenes
        .iter()
        .map(|s| {
            let b = &world.features[&s.image_id];
            let out = infer_image(
                store,
                &model_config(),
                bank,
                &world.taxonomy,
                &b.v_d,
                &b.v_s,
                &b.v_g,
                infer_cfg,
            )
            .unwrap();
            let ground_truth = world.annotations[&s.image_id]
                .iter()
                .map(|t| GroundTruthBox {
                    hoi: t.hoi_labels[0],
                    human: Box::from_cxcywh(
                        t.human_box[0],
                        t.human_box[1],
                        t.human_box[2],
                        t.human_box[3],
                    )
                    .unwrap(),
                    object: Box::from_cxcywh(
                        t.object_box[0],
                        t.object_box[1],
                        t.object_box[2],
                        t.object_box[3],
                    )
                    .unwrap(),
                })
                .collect();
            EvalItem {
                predictions: out.triplets,
                ground_truth,
            }
        })
        .collect()
}

#[test]
fn inference_emits_valid_nms_survivors_and_attention_maps() {
    let (world, _examples, bank, store) = setup();
    let scene = &world.scenes[0];
    let b = &world.features[&scene.image_id];
    let cfg = InferConfig::default();
    let out = infer_image(
        &store,
        &model_config(),
        &bank,
        &world.taxonomy,
        &b.v_d,
        &b.v_s,
        &b.v_g,
        &cfg,
    )
    .unwrap();
    assert!(!out.triplets.is_empty());
    assert!(out.triplets.len() <= cfg.keep_top);
    for w in out.triplets.windows(2) {
        assert!(w[0].score >= w[1].score, "NMS output sorted by score");
    }
    for t in &out.triplets {
        assert!(t.hoi < world.taxonomy.num_hois());
        t.human.validate().unwrap();
        t.object.validate().unwrap();
    }
    assert_eq!(out.scores.triplet.shape(), &[4, 12]);

    // One dump per decoder layer; every attention row sums to 1.
    assert_eq!(out.attention.len(), model_config().interaction.num_layers);
    for layer in &out.attention {
        for head in layer
            .self_weights
            .iter()
            .chain(&layer.clip_weights)
            .chain(&layer.det_weights)
        {
            for r in 0..head.shape()[0] {
                let sum: Real = head.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "attention row sums to {sum}");
            }
        }
    }
}

#[test]
fn training_improves_map_on_the_training_scenes() {
    let (world, examples, bank, mut store) = setup();
    let infer_cfg = InferConfig::default();
    let before = compute_map(
        &eval_items(&world, &store, &bank, &infer_cfg),
        &world.taxonomy,
        None,
        ApInterpolation::Envelope,
    )
    .unwrap();
    let cfg = TrainConfig {
        steps: 250,
        lr: 1e-2,
        log_every: 0,
        ..TrainConfig::default()
    };
    train(
        &mut store,
        &model_config(),
        &examples,
        &bank.e_inter,
        &bank.e_v,
        &world.taxonomy,
        &cfg,
        |_| {},
    )
    .unwrap();
    let after = compute_map(
        &eval_items(&world, &store, &bank, &infer_cfg),
        &world.taxonomy,
        None,
        ApInterpolation::Envelope,
    )
    .unwrap();
    assert!(
        after.full > before.full,
        "mAP did not improve: {} → {}",
        before.full,
        after.full
    );
}
