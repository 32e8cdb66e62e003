//! Tensor-core tests: forward kernels against independently computed
//! references, backward passes against closed forms and finite differences,
//! and the HCTF container format.

use approx::assert_abs_diff_eq;
use hoidet::tensor::{finite_diff_check, hctf, Graph, Real, Tensor, TensorError};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

const FD_H: Real = 1e-5;
const FD_TOL: Real = 1e-4;

// ── Forward kernels vs. frozen references ───────────────────────────────

#[test]
fn softmax_matches_high_precision_reference() {
    // Reference computed with 50-digit arithmetic for input [1, 2, 3].
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    let expect = [
        0.09003057317038045799802210,
        0.24472847105479765247295960,
        0.66524095577482188952901830,
    ];
    for (a, e) in g.value(y).data().iter().zip(expect) {
        assert_abs_diff_eq!(a, &e, epsilon = 1e-15);
    }
}

#[test]
fn softmax_is_invariant_to_constant_shift() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![4], vec![10.0, 11.0, 9.5, 10.2]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    let xs = g.add_scalar(x, 1000.0);
    let ys = g.softmax(xs, 0).unwrap();
    for (a, b) in g.value(y).data().iter().zip(g.value(ys).data()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

/// Independent triple-loop product used only by tests.
fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::from_vec(vec![m, n], out).unwrap()
}

#[test]
fn matmul_matches_hand_example_and_oracle() {
    let mut g = Graph::new();
    // [[1,2],[3,4]] · [[5,6],[7,8]] = [[19,22],[43,50]]
    let a = g.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = g.constant(Tensor::from_vec(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let (m, k, n) = (
            rng.gen_range(1..6),
            rng.gen_range(1..6),
            rng.gen_range(1..6),
        );
        let at = Tensor::randn(&[m, k], 1.0, &mut rng);
        let bt = Tensor::randn(&[k, n], 1.0, &mut rng);
        let mut g = Graph::new();
        let a = g.constant(at.clone());
        let b = g.constant(bt.clone());
        let c = g.matmul(a, b).unwrap();
        let want = matmul_oracle(&at, &bt);
        for (x, y) in g.value(c).data().iter().zip(want.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }
}

#[test]
fn l2_normalize_hand_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap());
    let y = g.l2_normalize(x, 0).unwrap();
    assert_abs_diff_eq!(g.value(y).data()[0], 0.6, epsilon = 1e-15);
    assert_abs_diff_eq!(g.value(y).data()[1], 0.8, epsilon = 1e-15);

    // Row-wise over a matrix.
    let m = g.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 5.0, 12.0]).unwrap());
    let ym = g.l2_normalize(m, 1).unwrap();
    let want = [1.0, 0.0, 5.0 / 13.0, 12.0 / 13.0];
    for (a, e) in g.value(ym).data().iter().zip(want) {
        assert_abs_diff_eq!(a, &e, epsilon = 1e-15);
    }
}

#[test]
fn l2_normalize_rejects_zero_rows() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
    match g.l2_normalize(x, 1) {
        Err(TensorError::ZeroNorm { index, .. }) => assert_eq!(index, 1),
        other => panic!("expected ZeroNorm, got {other:?}"),
    }
}

#[test]
fn layer_norm_matches_reference() {
    // 50-digit reference for row [1,2,3,4] with unit gamma, zero beta, eps 1e-5.
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let gamma = g.constant(Tensor::filled(&[4], 1.0));
    let beta = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    let expect = [
        -1.3416354199689269825652065,
        -0.4472118066563089941884021,
        0.4472118066563089941884021,
        1.3416354199689269825652065,
    ];
    for (a, e) in g.value(y).data().iter().zip(expect) {
        assert_abs_diff_eq!(a, &e, epsilon = 1e-14);
    }
}

#[test]
fn bce_and_focal_match_reference_values() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::from_vec(vec![2], vec![0.7, -1.3]).unwrap());
    let targets = Tensor::from_vec(vec![2], vec![1.0, 0.25]).unwrap();
    let loss = g.bce_with_logits(logits, &targets).unwrap();
    assert_abs_diff_eq!(
        g.value(loss).data()[0],
        0.40318604888545789319090632593,
        epsilon = 1e-15
    );
    assert_abs_diff_eq!(
        g.value(loss).data()[1],
        0.56600845383299220526800220372,
        epsilon = 1e-15
    );

    let l2 = g.constant(Tensor::from_vec(vec![2], vec![0.9, 0.9]).unwrap());
    let t2 = Tensor::from_vec(vec![2], vec![1.0, 0.0]).unwrap();
    let fl = g.focal_bce_with_logits(l2, &t2, 0.25, 2.0).unwrap();
    assert_abs_diff_eq!(
        g.value(fl).data()[0],
        0.0071258677660672467108493206539,
        epsilon = 1e-15
    );
    assert_abs_diff_eq!(
        g.value(fl).data()[1],
        0.47050517040404183985083529794,
        epsilon = 1e-15
    );
}

#[test]
fn cross_entropy_rows_matches_reference() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::from_vec(vec![1, 3], vec![0.5, 1.5, -0.5]).unwrap());
    let loss = g
        .cross_entropy_rows(logits, &[2], Some(&[1.0, 1.0, 2.5]))
        .unwrap();
    assert_abs_diff_eq!(
        g.value(loss).data()[0],
        6.0190149111109507612072997614,
        epsilon = 1e-14
    );
}

#[test]
fn top_k_mask_keeps_largest_and_breaks_ties_low_index() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![5], vec![0.5, 2.0, 2.0, -1.0, 3.0]).unwrap());
    let y = g.top_k_mask(x, 2).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 2.0, 0.0, 0.0, 3.0]);
    let y3 = g.top_k_mask(x, 3).unwrap();
    assert_eq!(g.value(y3).data(), &[0.0, 2.0, 2.0, 0.0, 3.0]);
}

// ── Backward: closed forms ──────────────────────────────────────────────

#[test]
fn grad_of_sum_of_squares_is_two_x() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum_all(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
}

#[test]
fn grad_of_softmax_cross_entropy_is_p_minus_onehot() {
    let mut g = Graph::new();
    let logits = g.param(Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let ce = g.cross_entropy_rows(logits, &[0], None).unwrap();
    let loss = g.sum_all(ce);
    let grads = g.backward(loss).unwrap();
    let p = [
        0.09003057317038045799802210,
        0.24472847105479765247295960,
        0.66524095577482188952901830,
    ];
    let grad = grads.get(logits).unwrap();
    assert_abs_diff_eq!(grad.data()[0], p[0] - 1.0, epsilon = 1e-14);
    assert_abs_diff_eq!(grad.data()[1], p[1], epsilon = 1e-14);
    assert_abs_diff_eq!(grad.data()[2], p[2], epsilon = 1e-14);
}

#[test]
fn grad_of_sigmoid_at_zero_is_quarter() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(0.0));
    let y = g.sigmoid(x);
    let loss = g.sum_all(y);
    let grads = g.backward(loss).unwrap();
    assert_abs_diff_eq!(grads.get(x).unwrap().item(), 0.25, epsilon = 1e-15);
}

#[test]
fn focal_gradient_matches_reference_derivative() {
    // d/dlogit at l=0.9 computed with 50-digit arithmetic.
    let mut g = Graph::new();
    let l = g.param(Tensor::from_vec(vec![2], vec![0.9, 0.9]).unwrap());
    let t = Tensor::from_vec(vec![2], vec![1.0, 0.0]).unwrap();
    let fl = g.focal_bce_with_logits(l, &t, 0.25, 2.0).unwrap();
    let loss = g.sum_all(fl);
    let grads = g.backward(loss).unwrap();
    let grad = grads.get(l).unwrap();
    assert_abs_diff_eq!(grad.data()[0], -0.016169820284298312213418826, epsilon = 1e-14);
    assert_abs_diff_eq!(grad.data()[1], 0.54151114753694577026681116, epsilon = 1e-14);
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
    match g.backward(x) {
        Err(TensorError::NotScalar(shape)) => assert_eq!(shape, vec![2]),
        other => panic!("expected NotScalar, got {other:?}"),
    }
}

#[test]
fn backward_accumulates_through_shared_inputs() {
    // loss = sum(x + x) ⇒ dx = 2 everywhere.
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![2], vec![3.0, -1.0]).unwrap());
    let y = g.add(x, x).unwrap();
    let loss = g.sum_all(y);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
}

// ── Backward: finite differences over the whole op set ──────────────────

/// Smooth positive offset so that div/abs-adjacent ops stay away from kinks.
fn smooth_positive(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = 1.5 + v.abs();
    }
}

#[test]
fn finite_differences_cover_every_op() {
    for seed in 0..60u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let bias = Tensor::randn(&[5], 1.0, &mut rng);
        let gamma = Tensor::randn(&[4], 1.0, &mut rng);
        let beta = Tensor::randn(&[4], 1.0, &mut rng);
        let mut bpos = Tensor::randn(&[3, 4], 1.0, &mut rng);
        smooth_positive(&mut bpos);

        // One composite expression touching add/sub/mul/div/scale/relu/
        // sigmoid/minimum/maximum/matmul/add_bias/softmax/l2norm/layernorm/
        // mean_axis/concat/slice/transpose/reshape.
        let check = finite_diff_check(
            &[a.clone(), b.clone(), w.clone(), bias.clone(), gamma.clone(), beta.clone(), bpos.clone()],
            FD_H,
            |g, ids| {
                let (a, b, w, bias, gamma, beta, bpos) =
                    (ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6]);
                let s = g.add(a, b)?;
                let d = g.sub(s, b)?;
                let m = g.mul(d, b)?;
                let q = g.div(m, bpos)?;
                let sc = g.scale(q, 0.7);
                let r = g.relu(sc);
                let sg = g.sigmoid(r);
                let mn = g.minimum(sg, b)?;
                let mx = g.maximum(mn, a)?;
                let ln = g.layer_norm(mx, gamma, beta, 1e-5)?;
                let sm = g.softmax(ln, 1)?;
                let l2 = g.l2_normalize(sm, 1)?;
                let cat = g.concat(&[l2, a], 0)?;
                let sl = g.slice(cat, 0, 1, 4)?;
                let mm = g.linear(sl, w, bias)?;
                let tr = g.transpose(mm)?;
                let rs = g.reshape(tr, &[4, 5])?;
                let mean = g.mean_axis(rs, 0)?;
                let loss = g.sum_all(mean);
                Ok(loss)
            },
        )
        .unwrap();
        assert!(
            check.passes(FD_TOL),
            "seed {seed}: max rel err {} at {:?}",
            check.max_rel_err,
            check.worst
        );
    }
}

#[test]
fn finite_differences_cover_losses_and_masks() {
    for seed in 100..140u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let vec_in = Tensor::randn(&[6], 1.0, &mut rng);
        let targets = {
            let mut t = Tensor::zeros(&[4, 6]);
            for v in t.data_mut() {
                *v = if rng.gen::<Real>() < 0.3 { 1.0 } else { 0.0 };
            }
            t
        };
        let classes: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();

        let t2 = targets.clone();
        let cls = classes.clone();
        let check = finite_diff_check(&[logits, vec_in], FD_H, move |g, ids| {
            let bce = g.bce_with_logits(ids[0], &t2)?;
            let focal = g.focal_bce_with_logits(ids[0], &t2, 0.25, 2.0)?;
            let ce = g.cross_entropy_rows(ids[0], &cls, Some(&[1.0, 0.5, 2.0, 1.0, 1.0, 0.1]))?;
            let abs = g.abs(ids[1]);
            let topk = g.top_k_mask(abs, 3)?;
            let s1 = g.sum_all(bce);
            let s2 = g.sum_all(focal);
            let s3 = g.sum_all(ce);
            let s4 = g.sum_all(topk);
            let t12 = g.add(s1, s2)?;
            let t34 = g.add(s3, s4)?;
            let loss = g.add(t12, t34)?;
            Ok(loss)
        })
        .unwrap();
        assert!(
            check.passes(FD_TOL),
            "seed {seed}: max rel err {} at {:?}",
            check.max_rel_err,
            check.worst
        );
    }
}

#[test]
fn dropout_backward_applies_the_forward_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::with_dropout_rng(rng.clone());
    let x = g.param(Tensor::randn(&[4, 8], 1.0, &mut rng));
    let y = g.dropout(x, 0.5).unwrap();
    let loss = g.sum_all(y);
    let grads = g.backward(loss).unwrap();
    // Each grad entry must equal the observed forward scaling (0 or 1/keep).
    let xv = g.value(x).clone();
    let yv = g.value(y).clone();
    for i in 0..xv.numel() {
        let scale = if xv.data()[i] == 0.0 {
            // Can't infer the mask from a zero input; skip.
            continue;
        } else {
            yv.data()[i] / xv.data()[i]
        };
        assert_abs_diff_eq!(grads.get(x).unwrap().data()[i], scale, epsilon = 1e-12);
    }
    // Without an rng the op is the identity.
    let mut g2 = Graph::new();
    let x2 = g2.param(Tensor::randn(&[4], 1.0, &mut rng));
    let y2 = g2.dropout(x2, 0.9).unwrap();
    assert_eq!(g2.value(x2).data(), g2.value(y2).data());
}

// ── HCTF container ──────────────────────────────────────────────────────

#[test]
fn hctf_f64_roundtrip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let t = Tensor::randn(&[3, 5, 2], 1.0, &mut rng);
    let mut buf = Vec::new();
    hctf::write(&mut buf, &t, hctf::Dtype::F64).unwrap();
    let back = hctf::read(&buf[..]).unwrap();
    assert_eq!(back.shape(), t.shape());
    assert_eq!(back.data(), t.data());
}

#[test]
fn hctf_f32_roundtrip_is_exact_at_f32_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let t = Tensor::randn(&[4, 4], 1.0, &mut rng);
    let mut buf = Vec::new();
    hctf::write(&mut buf, &t, hctf::Dtype::F32).unwrap();
    let back = hctf::read(&buf[..]).unwrap();
    for (a, b) in back.data().iter().zip(t.data()) {
        assert_eq!(*a, *b as f32 as Real);
    }
}

#[test]
fn hctf_header_layout_is_stable() {
    let t = Tensor::from_vec(vec![1, 2], vec![1.0, -1.0]).unwrap();
    let mut buf = Vec::new();
    hctf::write(&mut buf, &t, hctf::Dtype::F64).unwrap();
    assert_eq!(&buf[0..4], b"HCTF");
    assert_eq!(buf[4], 1); // version
    assert_eq!(buf[5], 1); // f64
    assert_eq!(u32::from_le_bytes(buf[6..10].try_into().unwrap()), 2);
    assert_eq!(u64::from_le_bytes(buf[10..18].try_into().unwrap()), 1);
    assert_eq!(u64::from_le_bytes(buf[18..26].try_into().unwrap()), 2);
    assert_eq!(buf.len(), 26 + 16);
}

#[test]
fn hctf_rejects_corrupt_streams() {
    let t = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let mut buf = Vec::new();
    hctf::write(&mut buf, &t, hctf::Dtype::F64).unwrap();

    let mut bad_magic = buf.clone();
    bad_magic[0] = b'X';
    assert!(matches!(
        hctf::read(&bad_magic[..]),
        Err(hctf::HctfError::BadMagic { .. })
    ));

    let mut bad_version = buf.clone();
    bad_version[4] = 9;
    assert!(matches!(
        hctf::read(&bad_version[..]),
        Err(hctf::HctfError::BadVersion(9))
    ));

    let mut bad_dtype = buf.clone();
    bad_dtype[5] = 7;
    assert!(matches!(
        hctf::read(&bad_dtype[..]),
        Err(hctf::HctfError::BadDtype(7))
    ));

    let truncated = &buf[..buf.len() - 3];
    assert!(matches!(
        hctf::read(truncated),
        Err(hctf::HctfError::Truncated { .. })
    ));
}

#[test]
fn hctf_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.hctf");
    let t = Tensor::from_vec(vec![2, 3], vec![0.5, -0.25, 3.0, 1e-9, 1e9, 0.0]).unwrap();
    hctf::write_file(&path, &t, hctf::Dtype::F64).unwrap();
    let back = hctf::read_file(&path).unwrap();
    assert_eq!(back.shape(), t.shape());
    assert_eq!(back.data(), t.data());
}

// ── Property tests ──────────────────────────────────────────────────────

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[rows, cols], 1.0, &mut rng);
        let mut g = Graph::new();
        let id = g.constant(x);
        let y = g.softmax(id, 1).unwrap();
        for row in g.value(y).data().chunks(cols) {
            let sum: Real = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn l2_normalize_is_idempotent(n in 1usize..8, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor::randn(&[3, n], 1.0, &mut rng);
        for v in x.data_mut() { *v += 0.1 * v.signum() + if *v == 0.0 { 0.1 } else { 0.0 }; }
        let mut g = Graph::new();
        let id = g.constant(x);
        let once = g.l2_normalize(id, 1).unwrap();
        let twice = g.l2_normalize(once, 1).unwrap();
        for (a, b) in g.value(once).data().iter().zip(g.value(twice).data()) {
            prop_assert!((a - b).abs() < 1e-14);
        }
        for row in g.value(once).data().chunks(n) {
            let norm: Real = row.iter().map(|v| v * v).sum::<Real>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_then_slice_roundtrips(rows_a in 1usize..4, rows_b in 1usize..4, cols in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[rows_a, cols], 1.0, &mut rng);
        let b = Tensor::randn(&[rows_b, cols], 1.0, &mut rng);
        let mut g = Graph::new();
        let ia = g.constant(a.clone());
        let ib = g.constant(b.clone());
        let cat = g.concat(&[ia, ib], 0).unwrap();
        let sa = g.slice(cat, 0, 0, rows_a).unwrap();
        let sb = g.slice(cat, 0, rows_a, rows_b).unwrap();
        prop_assert_eq!(g.value(sa).data(), a.data());
        prop_assert_eq!(g.value(sb).data(), b.data());
    }

    #[test]
    fn top_k_mask_keeps_exactly_k(n in 1usize..12, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[n], 1.0, &mut rng);
        let k = (seed as usize) % (n + 1);
        let mut g = Graph::new();
        let id = g.constant(x);
        let y = g.top_k_mask(id, k).unwrap();
        let kept = g.value(y).data().iter().filter(|&&v| v != 0.0).count();
        // Ties and exact zeros can only reduce the count below k.
        prop_assert!(kept <= k);
        let x_nonzero = g.value(id).data().iter().filter(|&&v| v != 0.0).count();
        prop_assert!(kept == k.min(x_nonzero) || kept <= k);
    }

    #[test]
    fn transpose_is_involutive(r in 1usize..5, c in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[r, c], 1.0, &mut rng);
        let mut g = Graph::new();
        let id = g.constant(x.clone());
        let t = g.transpose(id).unwrap();
        let tt = g.transpose(t).unwrap();
        prop_assert_eq!(g.value(tt).data(), x.data());
        prop_assert_eq!(g.value(tt).shape(), x.shape());
    }
}
