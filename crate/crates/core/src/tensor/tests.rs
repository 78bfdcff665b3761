use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::gradcheck::{check, CheckOptions};
use crate::rng;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, &[]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn fd_ok(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>) {
    let rep = check(name, inputs, CheckOptions::default(), f).unwrap();
    assert!(rep.passed(), "{name}: max rel err {:e}", rep.max_rel_err);
}

/// Weighted sum so every output entry gets a distinct upstream gradient.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> crate::Result<Var> {
    let w = random(tape.shape(y), seed);
    let wv = tape.constant(w);
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

// ── matmul ──────────────────────────────────────────────────────────

#[test]
fn matmul_identity_and_hand_case() {
    let mut tape = Tape::<f64>::new();
    let eye = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let x = tape.constant(t64(&[2, 2], &[0.3, -1.0, 2.0, 5.0]));
    let y = tape.matmul(eye, x).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());

    let a = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t64(&[2, 1], &[1.0, 1.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), &[2, 1]);
    assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(crate::Error::Dimension { .. })));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let rep = check("matmul", &[random(&[3, 4], 1), random(&[4, 2], 2)], CheckOptions { tolerance: 1e-6, ..Default::default() }, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        probe(t, y, 3)
    })
    .unwrap();
    assert!(rep.max_rel_err <= 1e-6, "{}", rep.max_rel_err);
}

#[test]
fn bmm_and_permute_gradients() {
    fd_ok("bmm", &[random(&[2, 3, 4], 4), random(&[2, 4, 2], 5)], |t, v| {
        let y = t.bmm(v[0], v[1])?;
        probe(t, y, 6)
    });
    fd_ok("permute", &[random(&[2, 3, 4], 7)], |t, v| {
        let y = t.permute(v[0], &[2, 0, 1])?;
        probe(t, y, 8)
    });
}

// ── conv / pool ─────────────────────────────────────────────────────

#[test]
fn conv_unit_kernel_is_identity() {
    let mut tape = Tape::<f64>::new();
    let x = random(&[1, 1, 3, 3], 9);
    let xv = tape.constant(x.clone());
    let k = tape.constant(t64(&[1, 1, 1, 1], &[1.0]));
    let y = tape.conv(xv, k, ConvSpec::d2(1, 0)).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv1d_hand_case() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
    let k = tape.constant(t64(&[1, 1, 2], &[1.0, 1.0]));
    let y = tape.conv(x, k, ConvSpec::d1(1, 0)).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 3]);
    assert_eq!(tape.value(y).data(), &[3.0, 5.0, 7.0]);
}

#[test]
fn conv_output_extent_and_oversized_kernel() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([2, 3, 7, 6]));
    let k = tape.constant(Tensor::zeros([4, 3, 3, 3]));
    let y = tape.conv(x, k, ConvSpec::d2(2, 1)).unwrap();
    // floor((7 + 2 - 3)/2) + 1 = 4, floor((6 + 2 - 3)/2) + 1 = 3
    assert_eq!(tape.shape(y), &[2, 4, 4, 3]);

    let big = tape.constant(Tensor::zeros([1, 3, 9, 9]));
    assert!(matches!(tape.conv(x, big, ConvSpec::d2(1, 0)), Err(crate::Error::Dimension { .. })));
    let wrong_c = tape.constant(Tensor::zeros([1, 2, 3, 3]));
    assert!(tape.conv(x, wrong_c, ConvSpec::d2(1, 0)).is_err());
}

#[test]
fn conv_gradients_match_finite_differences() {
    for (i, spec) in [ConvSpec::d2(1, 1), ConvSpec::d2(2, 0), ConvSpec::d2(2, 1)].into_iter().enumerate() {
        let rep = check("conv2d", &[random(&[2, 2, 5, 4], 10 + i as u64), random(&[3, 2, 3, 3], 20 + i as u64)], CheckOptions { tolerance: 1e-6, ..Default::default() }, |t, v| {
            let y = t.conv(v[0], v[1], spec)?;
            probe(t, y, 30)
        })
        .unwrap();
        assert!(rep.max_rel_err <= 1e-6, "{spec:?}: {}", rep.max_rel_err);
    }
    fd_ok("conv1d", &[random(&[2, 3, 6], 40), random(&[2, 3, 3], 41)], |t, v| {
        let y = t.conv(v[0], v[1], ConvSpec::d1(1, 1))?;
        probe(t, y, 42)
    });
}

#[test]
fn max_pool_cases() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::full([1, 1, 4, 4], 2.5));
    let y = tape.max_pool(c, PoolSpec::d2(2, 2)).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 2.5));

    let x = tape.constant(t64(&[1, 1, 4], &[1.0, 3.0, 2.0, 4.0]));
    let y = tape.max_pool(x, PoolSpec::d1(2, 2)).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 4.0]);

    assert!(tape.max_pool(x, PoolSpec::d1(0, 1)).is_err());
}

#[test]
fn max_pool_tie_routes_gradient_to_first() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[1, 1, 2], &[2.0, 2.0]));
    let y = tape.max_pool(x, PoolSpec::d1(2, 2)).unwrap();
    let l = tape.sum(y).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 0.0]);
}

#[test]
fn max_pool_gradient_matches_finite_differences() {
    fd_ok("max_pool", &[random(&[2, 2, 4, 6], 50)], |t, v| {
        let y = t.max_pool(v[0], PoolSpec::d2(2, 2))?;
        probe(t, y, 51)
    });
}

// ── elementwise / softmax ───────────────────────────────────────────

#[test]
fn elementwise_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[3], &[-1.0, 0.0, 2.0]));
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = tape.constant(t64(&[1], &[0.0]));
    let th = tape.tanh(z).unwrap();
    assert_eq!(tape.item(th), 0.0);
    let p = tape.constant(t64(&[4], &[0.01, 0.5, 1.0, 30.0]));
    let e = tape.exp(p).unwrap();
    let l = tape.log(e).unwrap();
    for (a, b) in tape.value(l).data().iter().zip(tape.value(p).data()) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn log_of_non_positive_is_domain_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[2], &[1.0, 0.0]));
    assert!(matches!(tape.log(x), Err(crate::Error::Domain { .. })));
}

#[test]
fn non_finite_output_is_an_error() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new([1], vec![200.0f32]).unwrap());
    assert!(matches!(tape.exp(x), Err(crate::Error::NonFinite { .. })));
}

#[test]
fn elementwise_gradients() {
    let pos = random(&[3, 4], 60).map(|v| v.abs() + 0.2);
    fd_ok("tanh", &[random(&[3, 4], 61)], |t, v| {
        let y = t.tanh(v[0])?;
        probe(t, y, 62)
    });
    fd_ok("exp", &[random(&[3, 4], 63)], |t, v| {
        let y = t.exp(v[0])?;
        probe(t, y, 64)
    });
    fd_ok("log", &[pos], |t, v| {
        let y = t.log(v[0])?;
        probe(t, y, 65)
    });
    // keep inputs away from the kink
    let away = random(&[3, 4], 66).map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    fd_ok("relu", &[away], |t, v| {
        let y = t.relu(v[0])?;
        probe(t, y, 67)
    });
    fd_ok("add_mul_sub_scale", &[random(&[2, 3], 68), random(&[2, 3], 69)], |t, v| {
        let a = t.add(v[0], v[1])?;
        let m = t.mul(a, v[0])?;
        let s = t.sub(m, v[1])?;
        let y = t.scale(s, -1.7)?;
        probe(t, y, 70)
    });
    fd_ok("add_along", &[random(&[2, 3, 4], 71), random(&[3], 72)], |t, v| {
        let y = t.add_along(v[0], v[1], 1)?;
        probe(t, y, 73)
    });
    fd_ok("sum_axis", &[random(&[2, 3, 4], 74)], |t, v| {
        let y = t.sum_axis(v[0], 1)?;
        probe(t, y, 75)
    });
    fd_ok("gather_diag", &[random(&[3, 3], 76)], |t, v| {
        let g = t.gather_rows(v[0], &[2, 0, 2])?;
        let d = t.diag(v[0])?;
        let a = probe(t, g, 77)?;
        let b = probe(t, d, 78)?;
        t.add(a, b)
    });
    fd_ok("pairwise_sq_dist", &[random(&[3, 4], 79), random(&[2, 4], 80)], |t, v| {
        let y = t.pairwise_sq_dist(v[0], v[1])?;
        probe(t, y, 81)
    });
}

#[test]
fn softmax_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[2], &[0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    let x = tape.constant(t64(&[2], &[0.0, 2f64.ln()]));
    let y = tape.softmax(x, 0).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] - 1.0 / 3.0).abs() < 1e-12 && (d[1] - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn softmax_and_log_softmax_gradients() {
    for axis in 0..2 {
        let rep = check("softmax", &[random(&[3, 4], 90 + axis as u64)], CheckOptions { tolerance: 1e-6, ..Default::default() }, |t, v| {
            let y = t.softmax(v[0], axis)?;
            probe(t, y, 92)
        })
        .unwrap();
        assert!(rep.max_rel_err <= 1e-6);
        fd_ok("log_softmax", &[random(&[3, 4], 93 + axis as u64)], |t, v| {
            let y = t.log_softmax(v[0], axis)?;
            probe(t, y, 95)
        });
    }
    let mask = vec![true, false, true, true, true, true, false, true, false, true, true, true];
    fd_ok("log_softmax_masked", &[random(&[3, 4], 96)], move |t, v| {
        let y = t.log_softmax_masked(v[0], 1, Some(mask.clone()))?;
        probe(t, y, 97)
    });
}

// ── batch norm ──────────────────────────────────────────────────────

fn bn_apply(x: Tensor<f64>, train: bool, running: &mut BnRunning<f64>, beta: f64) -> Tensor<f64> {
    let c = x.shape()[1];
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full([c], 1.0));
    let b = tape.constant(Tensor::full([c], beta));
    let y = tape.batch_norm(xv, g, b, running, train).unwrap();
    tape.value(y).clone()
}

#[test]
fn batch_norm_zero_variance_yields_bias() {
    let mut run = BnRunning::new(2);
    let y = bn_apply(Tensor::full([4, 2], 3.0), true, &mut run, 0.7);
    assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
}

#[test]
fn batch_norm_train_mean_is_zero_and_stats_update() {
    let mut run = BnRunning::new(3);
    let x = random(&[8, 3, 5], 100).map(|v| 4.0 * v + 2.0);
    let y = bn_apply(x, true, &mut run, 0.0);
    for ch in 0..3 {
        let vals: Vec<f64> = (0..8).flat_map(|b| (0..5).map(move |i| (b, i))).map(|(b, i)| y.at(&[b, ch, i])).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() <= 1e-5);
    }
    assert!(run.mean.iter().all(|&m| m != 0.0));
}

#[test]
fn batch_norm_eval_is_deterministic_and_batch_of_one_rejected_in_train() {
    let mut run = BnRunning { mean: vec![0.5, -1.0], var: vec![2.0, 0.25] };
    let x = random(&[3, 2], 101);
    let a = bn_apply(x.clone(), false, &mut run, 0.1);
    let b = bn_apply(x, false, &mut run, 0.1);
    assert_eq!(a, b);
    assert_eq!(run.mean, vec![0.5, -1.0]);

    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(Tensor::zeros([1, 2]));
    let g = tape.constant(Tensor::full([2], 1.0));
    let bb = tape.constant(Tensor::zeros([2]));
    assert!(matches!(tape.batch_norm(xv, g, bb, &mut run, true), Err(crate::Error::Config(_))));
}

#[test]
fn batch_norm_gradients() {
    for train in [true, false] {
        fd_ok("batch_norm", &[random(&[4, 3, 2], 110), random(&[3], 111), random(&[3], 112)], |t, v| {
            let mut run = BnRunning { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 1.5, 0.9] };
            let y = t.batch_norm(v[0], v[1], v[2], &mut run, train)?;
            probe(t, y, 113)
        });
    }
}

// ── cosine similarity ───────────────────────────────────────────────

#[test]
fn cosine_matrix_cases() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.cosine_similarity_matrix(a, a).unwrap();
    assert_eq!(tape.value(m).data(), &[1.0, 0.0, 0.0, 1.0]);

    let x = random(&[3, 5], 120);
    let y = random(&[3, 5], 121);
    let xv = tape.constant(x.clone());
    let x2 = tape.constant(x.map(|v| 2.0 * v));
    let yv = tape.constant(y);
    let m1 = tape.cosine_similarity_matrix(xv, yv).unwrap();
    let m2 = tape.cosine_similarity_matrix(x2, yv).unwrap();
    for (p, q) in tape.value(m1).data().iter().zip(tape.value(m2).data()) {
        assert!((p - q).abs() <= 1e-6);
    }

    let bad = tape.constant(Tensor::zeros([3, 4]));
    assert!(tape.cosine_similarity_matrix(xv, bad).is_err());
}

#[test]
fn cosine_matrix_gradient_and_zero_row_floor() {
    fd_ok("cosine", &[random(&[4, 3], 122), random(&[4, 3], 123)], |t, v| {
        let y = t.cosine_similarity_matrix(v[0], v[1])?;
        probe(t, y, 124)
    });
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros([2, 3]));
    let m = tape.cosine_similarity_matrix(z, z).unwrap();
    assert!(tape.value(m).all_finite());
}

// ── backward contract ───────────────────────────────────────────────

#[test]
fn backward_basic_cases_and_contract() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(random(&[2, 3], 130));
    let l = tape.sum(x).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(matches!(tape.backward(l), Err(crate::Error::Contract(_))));

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[1], &[2.0]));
    let y = tape.leaf(t64(&[1], &[3.0]));
    let p = tape.mul(x, y).unwrap();
    let g = tape.backward(p).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[3.0]);
    assert_eq!(g.wrt(y).unwrap().data(), &[2.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(crate::Error::Contract(_))));
}

#[test]
fn fan_out_gradients_accumulate() {
    let x0 = random(&[5], 140);
    let grad_of = |which: u8| {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x0.clone());
        let f = tape.tanh(x).unwrap();
        let f = tape.sum(f).unwrap();
        let g = tape.mul(x, x).unwrap();
        let g = tape.sum(g).unwrap();
        let l = match which {
            0 => f,
            1 => g,
            _ => tape.add(f, g).unwrap(),
        };
        tape.backward(l).unwrap().wrt(x).unwrap()
    };
    let (gf, gg, both) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..5 {
        assert!((both.data()[i] - gf.data()[i] - gg.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn grad_reverse_scales_by_negative_lambda() {
    let x0 = random(&[4], 150);
    let run = |lambda: Option<f64>| {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x0.clone());
        let h = match lambda {
            Some(l) => tape.grad_reverse(x, l).unwrap(),
            None => x,
        };
        let y = tape.tanh(h).unwrap();
        let l = tape.sum(y).unwrap();
        (tape.item(l), tape.backward(l).unwrap().wrt(x).unwrap())
    };
    let (v0, g0) = run(None);
    let (v1, g1) = run(Some(10.0));
    assert_eq!(v0, v1);
    for (a, b) in g0.data().iter().zip(g1.data()) {
        assert!((b + 10.0 * a).abs() < 1e-12);
    }
}

// ── adam ────────────────────────────────────────────────────────────

#[test]
fn adam_zero_gradient_without_decay_is_noop() {
    let p0 = random(&[3], 160);
    let mut params = vec![p0.clone()];
    let mut st = AdamState::new(AdamConfig { weight_decay: 0.0, ..Default::default() }, &params);
    st.step(&mut params, &[Some(Tensor::zeros([3]))]).unwrap();
    assert_eq!(params[0], p0);
    assert_eq!(st.step, 1);
}

#[test]
fn adam_first_step_is_lr_times_sign() {
    let p0 = t64(&[3], &[1.0, 1.0, 1.0]);
    let mut params = vec![p0.clone()];
    let cfg = AdamConfig { lr: 1e-3, weight_decay: 0.0, ..Default::default() };
    let mut st = AdamState::new(cfg, &params);
    st.step(&mut params, &[Some(t64(&[3], &[0.5, -2.0, 1e-3]))]).unwrap();
    let want = [-1e-3, 1e-3, -1e-3];
    for i in 0..3 {
        let d = params[0].data()[i] - p0.data()[i];
        assert!((d - want[i]).abs() < 1e-3 * 1e-4, "{d}");
    }
}

#[test]
fn adam_decoupled_decay_and_shape_errors() {
    let mut params = vec![t64(&[2], &[2.0, -4.0])];
    let cfg = AdamConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
    let mut st = AdamState::new(cfg, &params);
    st.step(&mut params, &[Some(Tensor::zeros([2]))]).unwrap();
    assert_eq!(params[0].data(), &[2.0 * 0.95, -4.0 * 0.95]);
    assert!(st.step(&mut params, &[Some(Tensor::zeros([3]))]).is_err());
    assert!(st.step(&mut params, &[]).is_err());
}

#[test]
fn adam_descends_quadratic_bowl_monotonically() {
    let mut params = vec![random(&[6], 170).map(|v| v.signum() * (1.5 + v.abs()))];
    let mut st = AdamState::new(AdamConfig { lr: 0.01, weight_decay: 0.0, ..Default::default() }, &params);
    let f = |p: &Tensor<f64>| p.data().iter().map(|v| v * v).sum::<f64>();
    let mut prev = f(&params[0]);
    for _ in 0..100 {
        let g = params[0].map(|v| 2.0 * v);
        st.step(&mut params, &[Some(g)]).unwrap();
        let cur = f(&params[0]);
        assert!(cur < prev, "{cur} !< {prev}");
        prev = cur;
    }
}

#[test]
fn cosine_schedule_shape() {
    let s = CosineSchedule { base_lr: 1.0, warmup_steps: 3, total_steps: 13 };
    assert!((s.lr_at(0) - 1.0 / 3.0).abs() < 1e-12);
    assert!((s.lr_at(2) - 1.0).abs() < 1e-12);
    assert!((s.lr_at(3) - 1.0).abs() < 1e-12);
    assert!((s.lr_at(8) - 0.5).abs() < 1e-12);
    assert!(s.lr_at(13).abs() < 1e-12);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([3, 4], vals).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for r in 0..3 {
            let s: f64 = (0..4).map(|c| tape.value(y).at(&[r, c])).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            let in_range = (0..4).map(|c| tape.value(y).at(&[r, c])).all(|p| p > 0.0 && p <= 1.0);
            prop_assert!(in_range);
        }
    }

    #[test]
    fn cosine_entries_are_bounded(a in proptest::collection::vec(-5.0f32..5.0, 12), b in proptest::collection::vec(-5.0f32..5.0, 12)) {
        let mut tape = Tape::<f32>::new();
        let av = tape.constant(Tensor::new([4, 3], a).unwrap());
        let bv = tape.constant(Tensor::new([4, 3], b).unwrap());
        let m = tape.cosine_similarity_matrix(av, bv).unwrap();
        prop_assert!(tape.value(m).data().iter().all(|&v| (-1.0 - 1e-6..=1.0 + 1e-6).contains(&v)));
    }
}
