//! Synthetic-data generator and dataset persistence tests: planted-signal
//! recovery, byte-level determinism, round-trip identity, strict schema
//! errors, and nested subsampling.

use std::collections::BTreeSet;
use std::path::Path;

use hoidet::classifiers::build_verb_classifier;
use hoidet::data_io::{
    generate_synthetic, load_dataset, save_dataset, save_manifest_subset, subsample_training,
    DataError, DatasetManifest, SynthConfig,
};
use hoidet::tensor::Real;

fn small_config() -> SynthConfig {
    SynthConfig {
        num_objects: 4,
        num_verbs: 3,
        num_images: 10,
        max_instances_per_image: 2,
        dim: 16,
        inst_dim: 16,
        inter_dim: 12,
        det_grid: [5, 5],
        clip_grid: [4, 4],
        sigma: 0.05,
        seed: 11,
        ..SynthConfig::default()
    }
}

fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

// ── Generation ──────────────────────────────────────────────────────────

#[test]
fn noiseless_world_recovers_verb_prototypes_by_arithmetic() {
    // σ = 0 with antipodal object prototypes: summing E_h − E_o over a
    // verb's object bag cancels the object components, leaving the verb
    // direction. Enough images that every verb sees at least two objects.
    let cfg = SynthConfig {
        sigma: 0.0,
        num_images: 200,
        antipodal_objects: true,
        ..small_config()
    };
    let world = generate_synthetic(&cfg).unwrap();
    // Exact cancellation needs every verb–object pairing observed.
    for n in 0..world.taxonomy.num_hois() {
        assert!(world.region_store.hoi_instances(n) > 0, "category {n} empty");
    }
    let e_v = build_verb_classifier(&world.region_store, &world.taxonomy).unwrap();
    for k in 0..cfg.num_verbs {
        let cos = dot(e_v.row(k), world.verb_prototypes.row(k));
        assert!(
            cos >= 1.0 - 1e-6,
            "verb {k} recovered with cosine {cos}, want ≥ 1 − 1e-6"
        );
    }
}

#[test]
fn noisy_world_still_ranks_true_verb_first() {
    let cfg = SynthConfig {
        sigma: 0.1,
        num_images: 300,
        ..small_config()
    };
    let world = generate_synthetic(&cfg).unwrap();
    let e_v = build_verb_classifier(&world.region_store, &world.taxonomy).unwrap();
    for k in 0..cfg.num_verbs {
        let sims: Vec<Real> = (0..cfg.num_verbs)
            .map(|k2| dot(e_v.row(k), world.verb_prototypes.row(k2)))
            .collect();
        let best = (0..cfg.num_verbs)
            .max_by(|&a, &b| sims[a].total_cmp(&sims[b]))
            .unwrap();
        assert_eq!(best, k, "verb {k} sims {sims:?}");
    }
}

#[test]
fn generated_tensors_have_documented_shapes_and_norms() {
    let cfg = small_config();
    let world = generate_synthetic(&cfg).unwrap();
    assert_eq!(world.scenes.len(), cfg.num_images);
    assert_eq!(world.taxonomy.num_hois(), cfg.num_objects * cfg.num_verbs);
    for scene in &world.scenes {
        let b = &world.features[&scene.image_id];
        assert_eq!(b.v_s.shape(), &[16, 12]);
        assert_eq!(b.v_d.shape(), &[25, 16]);
        assert_eq!(b.v_g.shape(), &[16]);
        let norm = dot(b.v_g.data(), b.v_g.data()).sqrt();
        assert!((norm - 1.0).abs() < 1e-12, "V_g norm {norm}");
        assert!(!scene.instances.is_empty());
        assert!(scene.instances.len() <= cfg.max_instances_per_image);
    }
    for r in 0..world.e_inter_fixture.shape()[0] {
        let row = world.e_inter_fixture.row(r);
        assert!((dot(row, row).sqrt() - 1.0).abs() < 1e-12);
    }
    for r in 0..world.sentence_fixture.shape()[0] {
        let row = world.sentence_fixture.row(r);
        assert!((dot(row, row).sqrt() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn annotations_are_valid_against_the_taxonomy() {
    let world = generate_synthetic(&small_config()).unwrap();
    let mut total = 0;
    for (id, triplets) in &world.annotations {
        assert!(world.features.contains_key(id));
        for t in triplets {
            t.validate(&world.taxonomy).unwrap();
            for b in [&t.human_box, &t.object_box] {
                assert!(b[0] - b[2] / 2.0 >= 0.0 && b[0] + b[2] / 2.0 <= 1.0);
                assert!(b[1] - b[3] / 2.0 >= 0.0 && b[1] + b[3] / 2.0 <= 1.0);
            }
        }
        total += triplets.len();
    }
    let counted: u64 = world.taxonomy.hois.iter().map(|h| h.count).sum();
    assert_eq!(counted as usize, total, "taxonomy counts mirror the scenes");
}

#[test]
fn hoi_subset_still_covers_every_verb_and_object() {
    let cfg = SynthConfig {
        num_objects: 10,
        num_verbs: 7,
        num_hois: Some(20),
        num_images: 5,
        ..small_config()
    };
    let world = generate_synthetic(&cfg).unwrap();
    assert_eq!(world.taxonomy.num_hois(), 20);
    let verbs: BTreeSet<usize> = world.taxonomy.hois.iter().map(|h| h.verb).collect();
    let objects: BTreeSet<usize> = world.taxonomy.hois.iter().map(|h| h.object).collect();
    assert_eq!(verbs.len(), 7);
    assert_eq!(objects.len(), 10);
}

#[test]
fn full_scale_preset_taxonomy_validates() {
    let cfg = SynthConfig {
        num_images: 3,
        ..SynthConfig::hico_scale()
    };
    let world = generate_synthetic(&cfg).unwrap();
    assert_eq!(world.taxonomy.num_objects(), 80);
    assert_eq!(world.taxonomy.num_verbs(), 117);
    assert_eq!(world.taxonomy.num_hois(), 600);
    world.taxonomy.validate().unwrap();
}

#[test]
fn bad_configs_are_rejected() {
    let cases = [
        SynthConfig {
            num_objects: 0,
            ..small_config()
        },
        SynthConfig {
            sigma: -0.5,
            ..small_config()
        },
        SynthConfig {
            inst_dim: 10, // not a multiple of 4
            ..small_config()
        },
        SynthConfig {
            num_hois: Some(1_000_000),
            ..small_config()
        },
        SynthConfig {
            num_hois: Some(2), // cannot cover 4 objects
            ..small_config()
        },
        SynthConfig {
            max_instances_per_image: 0,
            ..small_config()
        },
        SynthConfig {
            num_objects: 5, // antipodal pairing needs an even count
            ..small_config()
        },
        SynthConfig {
            num_objects: 12,
            num_verbs: 12,
            dim: 16, // 6 + 12 directions don't fit in 16
            ..small_config()
        },
    ];
    for cfg in cases {
        assert!(
            matches!(generate_synthetic(&cfg), Err(DataError::BadConfig(_))),
            "accepted {cfg:?}"
        );
    }
}

// ── Persistence ─────────────────────────────────────────────────────────

#[test]
fn same_seed_writes_byte_identical_datasets() {
    let cfg = small_config();
    let tmp = tempfile::tempdir().unwrap();
    let (d1, d2) = (tmp.path().join("a"), tmp.path().join("b"));
    save_dataset(&generate_synthetic(&cfg).unwrap(), &d1).unwrap();
    save_dataset(&generate_synthetic(&cfg).unwrap(), &d2).unwrap();
    let (t1, t2) = (tree_bytes(&d1), tree_bytes(&d2));
    assert!(!t1.is_empty());
    assert_eq!(
        t1.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        t2.iter().map(|(n, _)| n).collect::<Vec<_>>()
    );
    for ((name, b1), (_, b2)) in t1.iter().zip(&t2) {
        assert_eq!(b1, b2, "{name} differs between same-seed runs");
    }
}

#[test]
fn different_seeds_differ() {
    let w1 = generate_synthetic(&small_config()).unwrap();
    let w2 = generate_synthetic(&SynthConfig {
        seed: 12,
        ..small_config()
    })
    .unwrap();
    assert_ne!(w1.object_prototypes.data(), w2.object_prototypes.data());
}

#[test]
fn save_load_save_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ds");
    let world = generate_synthetic(&small_config()).unwrap();
    save_dataset(&world, &dir).unwrap();
    let loaded = load_dataset(&dir).unwrap();

    // Re-serialize the loaded JSON documents and compare bytes.
    let again = tmp.path().join("ds2");
    std::fs::create_dir_all(again.join("annotations")).unwrap();
    let manifest_bytes = {
        let mut b = serde_json::to_vec_pretty(&loaded.manifest).unwrap();
        b.push(b'\n');
        b
    };
    assert_eq!(
        manifest_bytes,
        std::fs::read(dir.join("manifest.json")).unwrap()
    );
    let tax_bytes = {
        let mut b = serde_json::to_vec_pretty(&loaded.taxonomy).unwrap();
        b.push(b'\n');
        b
    };
    assert_eq!(
        tax_bytes,
        std::fs::read(dir.join("taxonomy.json")).unwrap()
    );

    // Loaded tensors round-trip bitwise.
    for id in &loaded.manifest.image_ids {
        let b = loaded.features(id).unwrap();
        let orig = &world.features[id];
        assert_eq!(b.v_s.data(), orig.v_s.data());
        assert_eq!(b.v_d.data(), orig.v_d.data());
        assert_eq!(b.v_g.data(), orig.v_g.data());
    }
    assert_eq!(loaded.e_inter_fixture.data(), world.e_inter_fixture.data());
    assert_eq!(loaded.annotations, world.annotations);
}

#[test]
fn zero_image_world_round_trips_with_empty_manifest() {
    let cfg = SynthConfig {
        num_images: 0,
        ..small_config()
    };
    let world = generate_synthetic(&cfg).unwrap();
    assert!(world.scenes.is_empty());
    assert!(world.annotations.is_empty());
    let tmp = tempfile::tempdir().unwrap();
    save_dataset(&world, tmp.path()).unwrap();
    let loaded = load_dataset(tmp.path()).unwrap();
    assert!(loaded.manifest.image_ids.is_empty());
    assert!(loaded.annotations.is_empty());
    assert_eq!(loaded.taxonomy, world.taxonomy);
}

#[test]
fn unknown_manifest_field_is_a_format_error_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let world = generate_synthetic(&small_config()).unwrap();
    save_dataset(&world, tmp.path()).unwrap();
    let path = tmp.path().join("manifest.json");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["bogus_field"] = serde_json::json!(42);
    std::fs::write(&path, serde_json::to_vec_pretty(&doc).unwrap()).unwrap();
    match load_dataset(tmp.path()) {
        Err(DataError::Format { path: p, detail }) => {
            assert!(p.contains("manifest.json"), "path: {p}");
            assert!(detail.contains("bogus_field"), "detail: {detail}");
        }
        other => panic!("expected Format error, got {other:?}"),
    }
}

#[test]
fn unknown_annotation_field_is_a_format_error_with_line_number() {
    let tmp = tempfile::tempdir().unwrap();
    let world = generate_synthetic(&small_config()).unwrap();
    save_dataset(&world, tmp.path()).unwrap();
    let path = tmp.path().join("annotations").join("train.jsonl");
    let mut lines: Vec<String> = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    let mut doc: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    doc["extra"] = serde_json::json!("x");
    lines[1] = serde_json::to_string(&doc).unwrap();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    match load_dataset(tmp.path()) {
        Err(DataError::Format { path: p, detail }) => {
            assert!(p.contains("train.jsonl"), "path: {p}");
            assert!(detail.contains("line 2"), "detail: {detail}");
            assert!(detail.contains("extra"), "detail: {detail}");
        }
        other => panic!("expected Format error, got {other:?}"),
    }
}

#[test]
fn missing_feature_file_fails_referential_integrity() {
    let tmp = tempfile::tempdir().unwrap();
    let world = generate_synthetic(&small_config()).unwrap();
    save_dataset(&world, tmp.path()).unwrap();
    let victim = tmp
        .path()
        .join("features")
        .join(format!("{}.vd.hctf", world.scenes[3].image_id));
    std::fs::remove_file(&victim).unwrap();
    match load_dataset(tmp.path()) {
        Err(DataError::Missing { path }) => assert!(path.contains("vd.hctf"), "{path}"),
        other => panic!("expected Missing error, got {other:?}"),
    }
}

#[test]
fn region_bags_round_trip_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let world = generate_synthetic(&small_config()).unwrap();
    save_dataset(&world, tmp.path()).unwrap();
    let loaded = load_dataset(tmp.path()).unwrap();
    for hoi in 0..world.taxonomy.num_hois() {
        assert_eq!(
            world.region_store.hoi_instances(hoi),
            loaded.region_store.hoi_instances(hoi)
        );
        assert_eq!(
            world.region_store.hoi_rows(hoi),
            loaded.region_store.hoi_rows(hoi)
        );
    }
    for object in 0..world.taxonomy.num_objects() {
        assert_eq!(
            world.region_store.object_rows(object),
            loaded.region_store.object_rows(object)
        );
    }
    // The rebuilt store feeds the arithmetic builder identically.
    let original = build_verb_classifier(&world.region_store, &world.taxonomy).unwrap();
    let reloaded = build_verb_classifier(&loaded.region_store, &loaded.taxonomy).unwrap();
    assert_eq!(original, reloaded);
}

#[test]
fn missing_region_bag_fails_integrity() {
    let tmp = tempfile::tempdir().unwrap();
    let world = generate_synthetic(&small_config()).unwrap();
    save_dataset(&world, tmp.path()).unwrap();
    let populated = (0..world.taxonomy.num_hois())
        .find(|&h| world.region_store.hoi_instances(h) > 0)
        .unwrap();
    let victim = tmp
        .path()
        .join("classifiers")
        .join(format!("region.hoi.{populated:04}.hctf"));
    std::fs::remove_file(&victim).unwrap();
    match load_dataset(tmp.path()) {
        Err(DataError::Missing { path }) => assert!(path.contains("region.hoi"), "{path}"),
        other => panic!("expected Missing error, got {other:?}"),
    }
}

#[test]
fn region_bag_with_wrong_row_count_is_invalid() {
    let tmp = tempfile::tempdir().unwrap();
    let world = generate_synthetic(&small_config()).unwrap();
    save_dataset(&world, tmp.path()).unwrap();
    let populated = (0..world.taxonomy.num_objects())
        .find(|&o| world.region_store.object_instances(o) > 1)
        .unwrap();
    let victim = tmp
        .path()
        .join("classifiers")
        .join(format!("region.obj.{populated:04}.hctf"));
    let rows = world.region_store.object_rows(populated).unwrap();
    let truncated = hoidet::tensor::Tensor::from_vec(
        vec![1, rows.shape()[1]],
        rows.row(0).to_vec(),
    )
    .unwrap();
    hoidet::tensor::hctf::write_file(&victim, &truncated, hoidet::tensor::hctf::Dtype::F64)
        .unwrap();
    match load_dataset(tmp.path()) {
        Err(DataError::Invalid { what, detail }) => {
            assert!(what.contains("region bag"), "{what}");
            assert!(detail.contains("expected"), "{detail}");
        }
        other => panic!("expected Invalid error, got {other:?}"),
    }
}

#[test]
fn corrupt_annotation_labels_fail_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let world = generate_synthetic(&small_config()).unwrap();
    save_dataset(&world, tmp.path()).unwrap();
    let path = tmp.path().join("annotations").join("train.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    // Point an object class outside the taxonomy.
    let patched = text.replacen("\"object_class\":0", "\"object_class\":999", 1);
    let patched = if patched == text {
        text.replacen("\"object_class\":1", "\"object_class\":999", 1)
    } else {
        patched
    };
    assert_ne!(patched, text);
    std::fs::write(&path, patched).unwrap();
    assert!(matches!(
        load_dataset(tmp.path()),
        Err(DataError::Invalid { .. })
    ));
}

// ── Subsampling ─────────────────────────────────────────────────────────

fn manifest_of(n: usize) -> DatasetManifest {
    DatasetManifest {
        format_version: 1,
        config: small_config(),
        image_ids: (0..n).map(|i| format!("img_{i:05}")).collect(),
    }
}

#[test]
fn subsample_keeps_rounded_fraction_in_original_order() {
    let m = manifest_of(10);
    let half = subsample_training(&m, 0.5, 3).unwrap();
    assert_eq!(half.image_ids.len(), 5);
    // Original relative order is preserved.
    let mut sorted = half.image_ids.clone();
    sorted.sort();
    assert_eq!(half.image_ids, sorted);

    assert_eq!(subsample_training(&m, 1.0, 3).unwrap().image_ids, m.image_ids);
    assert_eq!(subsample_training(&m, 0.26, 3).unwrap().image_ids.len(), 3);
}

#[test]
fn subsample_is_deterministic_and_seed_sensitive() {
    let m = manifest_of(40);
    let a = subsample_training(&m, 0.3, 7).unwrap();
    let b = subsample_training(&m, 0.3, 7).unwrap();
    assert_eq!(a, b);
    let c = subsample_training(&m, 0.3, 8).unwrap();
    assert_ne!(a.image_ids, c.image_ids);
}

#[test]
fn subsamples_nest_for_a_fixed_seed() {
    let m = manifest_of(40);
    let small: BTreeSet<String> = subsample_training(&m, 0.05, 9)
        .unwrap()
        .image_ids
        .into_iter()
        .collect();
    let mid: BTreeSet<String> = subsample_training(&m, 0.15, 9)
        .unwrap()
        .image_ids
        .into_iter()
        .collect();
    let big: BTreeSet<String> = subsample_training(&m, 0.5, 9)
        .unwrap()
        .image_ids
        .into_iter()
        .collect();
    assert_eq!(small.len(), 2);
    assert_eq!(mid.len(), 6);
    assert_eq!(big.len(), 20);
    assert!(small.is_subset(&mid), "5% ⊄ 15%");
    assert!(mid.is_subset(&big), "15% ⊄ 50%");
}

#[test]
fn manifest_subset_saves_a_loadable_derived_dataset() {
    let world = generate_synthetic(&small_config()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let full_dir = tmp.path().join("full");
    save_dataset(&world, &full_dir).unwrap();
    let full = load_dataset(&full_dir).unwrap();

    let half = subsample_training(&full.manifest, 0.5, 21).unwrap();
    let half_dir = tmp.path().join("half");
    save_manifest_subset(&full, &half, &half_dir).unwrap();

    let loaded = load_dataset(&half_dir).unwrap();
    assert_eq!(loaded.manifest.image_ids, half.image_ids);
    assert_eq!(loaded.manifest.image_ids.len(), 5);
    // The taxonomy keeps the full-corpus instance counts, so the region
    // bags still pass the strict load-time size checks and classifier
    // construction is unchanged.
    assert_eq!(loaded.taxonomy, full.taxonomy);
    let e_full = build_verb_classifier(&full.region_store, &full.taxonomy).unwrap();
    let e_half = build_verb_classifier(&loaded.region_store, &loaded.taxonomy).unwrap();
    assert_eq!(e_full.data(), e_half.data());
    // Kept images round-trip their features byte for byte.
    for id in &half.image_ids {
        let a = full.features(id).unwrap();
        let b = loaded.features(id).unwrap();
        assert_eq!(a.v_s.data(), b.v_s.data());
        assert_eq!(a.v_d.data(), b.v_d.data());
        assert_eq!(a.v_g.data(), b.v_g.data());
        assert_eq!(full.annotations[id], loaded.annotations[id]);
    }
}

#[test]
fn manifest_subset_rejects_foreign_images() {
    let world = generate_synthetic(&small_config()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("full");
    save_dataset(&world, &dir).unwrap();
    let full = load_dataset(&dir).unwrap();

    let mut manifest = full.manifest.clone();
    manifest.image_ids = vec!["img_99999".into()];
    let err = save_manifest_subset(&full, &manifest, &tmp.path().join("bad")).unwrap_err();
    assert!(matches!(err, DataError::Invalid { .. }), "got {err:?}");
}

#[test]
fn bad_fractions_are_rejected() {
    let m = manifest_of(10);
    for f in [0.0, -0.2, 1.01, Real::NAN] {
        assert!(matches!(
            subsample_training(&m, f, 0),
            Err(DataError::BadFraction(_))
        ));
    }
}
