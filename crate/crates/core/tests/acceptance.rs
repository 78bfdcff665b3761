//! Acceptance suite. Runs as a plain binary so every criterion prints exactly
//! one PASS/FAIL line whether or not it succeeds.
//!
//! `cargo test --test acceptance -- 2 3` runs a subset.

use std::time::{Duration, Instant};

use neuroswap::augment::{calcium_augment, swap_behavior, swap_neural, swap_probabilities, CalciumKernel, NeighborIndex, Pool, PoseRef};
use neuroswap::encoders::{EncoderConfig, TemporalConfig};
use neuroswap::harness::{
    evaluate, evaluate_raw, run_ablation, train, BenchmarkReport, EvalOptions, Method, Rung, Task, TrainConfig,
};
use neuroswap::objectives::info_nce;
use neuroswap::preprocess::{apply_flow, delta_f_over_f, register_frame, register_stack, NeuralInput, RegistrationConfig};
use neuroswap::synthdata::{generate_world, Dataset, WorldConfig};
use neuroswap::{gradcheck, par, rng, Tape, Tensor};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const WORLD_SEED: u64 = 0;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const STEPS_PER_EPOCH: usize = 45;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// The standard world at desk resolution: 4 domains, 6 actions, 8 trials each.
fn standard_world() -> Dataset {
    let cfg = WorldConfig { height: 16, width: 16, blob_sigma_px: 1.5, ..Default::default() };
    generate_world(&cfg, WORLD_SEED).expect("standard world")
}

/// Compact encoders sized for the 16×16 world; 450 optimizer steps.
fn base_config() -> TrainConfig {
    let temporal = TemporalConfig { pre_pool: vec![32], post_pool: vec![32] };
    TrainConfig {
        epochs: 10,
        warmup_epochs: 1,
        steps_per_epoch: Some(STEPS_PER_EPOCH),
        lr: 1e-3,
        encoder: EncoderConfig {
            frame_convs: vec![4, 8],
            frame_fc: vec![32],
            neural_temporal: temporal.clone(),
            behavior_temporal: temporal,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn by_task(reports: &[BenchmarkReport], task: Task) -> &BenchmarkReport {
    reports.iter().find(|r| r.task == task).expect("task evaluated")
}

fn summary(reports: &[BenchmarkReport]) -> String {
    reports.iter().map(|r| format!("{} {:.1}", r.task, 100.0 * r.mean)).collect::<Vec<_>>().join(", ")
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let reports = gradcheck::suite(None).expect("gradient suite");
    let elapsed = t.elapsed();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let required = ["info_nce", "info_nce_domain_masked", "grl_path", "mmd"];
    let missing: Vec<&str> = required.iter().copied().filter(|n| !reports.iter().any(|r| r.name == *n)).collect();
    let worst = |tol: f64| reports.iter().filter(|r| r.tolerance == tol).map(|r| r.max_rel_err).fold(0.0, f64::max);
    let pass = failed.is_empty() && missing.is_empty() && elapsed <= Duration::from_secs(300);
    outcome(
        pass,
        format!(
            "{} checks, worst op err {:.1e} (tol {:.0e}), worst end-to-end err {:.1e} (tol {:.0e}), {:.1}s{}{}",
            reports.len(),
            worst(gradcheck::OP_TOLERANCE),
            gradcheck::OP_TOLERANCE,
            worst(gradcheck::END_TO_END_TOLERANCE),
            gradcheck::END_TO_END_TOLERANCE,
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") },
            if missing.is_empty() { String::new() } else { format!("; missing {missing:?}") },
        ),
    )
}

fn pose_pool(poses: &[[f32; 3]]) -> Pool<PoseRef> {
    let data = poses.iter().flatten().copied().collect();
    let refs = (0..poses.len()).map(|frame| PoseRef { trial: 0, frame }).collect();
    Pool::new(3, data, refs).expect("pool")
}

fn exact_oracles() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let mut check = |ok: bool, note: String| {
        pass &= ok;
        notes.push(note);
    };

    let mut tape = Tape::<f64>::new();
    let eye = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).expect("eye");
    let (a, b) = (tape.constant(eye.clone()), tape.constant(eye));
    let terms = info_nce(&mut tape, a, b, 1.0).expect("info_nce");
    let nce = tape.item(terms.total);
    check((nce - 1.25305).abs() <= 1e-4, format!("info_nce {nce:.5}"));

    let p = swap_probabilities(&[0.0, 2f64.ln()]).expect("probabilities");
    check((p[0] - 2.0 / 3.0).abs() <= 1e-9 && (p[1] - 1.0 / 3.0).abs() <= 1e-9, format!("swap p ({:.9}, {:.9})", p[0], p[1]));

    // domain 0 holds the query, domain 1 two candidates at distances 0 and ln 2
    let windows = vec![
        Pool::new(3, vec![0.0; 3], vec![0]).expect("pool"),
        Pool::new(3, vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0], vec![10, 11]).expect("pool"),
    ];
    let index = NeighborIndex::from_pools(128, vec![pose_pool(&[[0.0; 3]]), pose_pool(&[[0.0; 3], [2f32.ln(), 0.0, 0.0]])], windows)
        .expect("index");
    let q = Tensor::new([1, 1, 3], vec![0.0f32; 3]).expect("query");
    let mut r = rng::stream(11, &[0]);
    let draws = 10_000;
    let near = (0..draws).filter(|_| swap_behavior(&q, 0, &index, &mut r).data()[0] == 0.0).count();
    let pose_rate = near as f64 / draws as f64;
    let first = (0..draws).filter(|_| swap_neural(&q, 0, &index, &mut r) == Some((1, 10))).count();
    let window_rate = first as f64 / draws as f64;
    check(
        (pose_rate - 2.0 / 3.0).abs() <= 0.02 && (window_rate - 0.5).abs() <= 0.02,
        format!("MC pose rate {pose_rate:.3}, window rate {window_rate:.3}"),
    );

    let kernel = CalciumKernel::new(0.95, 32, 1.0).expect("kernel");
    let exact_kernel = kernel.values().iter().enumerate().all(|(t, &v)| v == 0.95f64.powi(t as i32));
    let half = CalciumKernel::new(0.5, 32, 1.0).expect("kernel");
    let donor = Tensor::new([2, 2], vec![1.0f32, 2.0, 4.0, 8.0]).expect("donor");
    let injected = calcium_augment(&Tensor::zeros([32, 2, 2]), &donor, &half, 0).expect("calcium");
    let exact_frames = (0..32).all(|t| {
        let s = 0.5f64.powi(t) as f32;
        injected.data()[t as usize * 4..(t as usize + 1) * 4].iter().zip(donor.data()).all(|(&v, &d)| v == s * d)
    });
    check(exact_kernel && exact_frames, format!("calcium γ^t exact {}", exact_kernel && exact_frames));

    let flat = delta_f_over_f(&Tensor::full([40, 3, 3], 3.0f32), 15).expect("dff");
    let flat_err = flat.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let trace: Vec<f32> = (0..60).map(|t| if t < 30 { 2.0 } else { 4.0 }).collect();
    let step = delta_f_over_f(&Tensor::new([60, 1, 1], trace).expect("trace"), 15).expect("dff");
    let plateau_err = step.data()[30..].iter().fold(0.0f32, |m, v| m.max((v - 100.0).abs()));
    check(flat_err <= 1e-6 && plateau_err <= 1e-6, format!("ΔF/F constant {flat_err:.1e}, plateau |x-100| {plateau_err:.1e}"));

    outcome(pass, notes.join("; "))
}

/// Smooth texture of Gaussian blobs sampled at `(x + dx, y + dy)`.
fn texture(size: usize, dx: f64, dy: f64) -> Tensor<f32> {
    let blobs = [(18.0, 22.0, 1.0, 30.0), (44.0, 16.0, 0.7, 20.0), (30.0, 46.0, 0.8, 40.0), (50.0, 50.0, 0.5, 25.0)];
    let mut v = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (xs, ys) = (x as f64 + dx, y as f64 + dy);
            let s: f64 = blobs.iter().map(|&(cx, cy, a, s2)| a * (-((xs - cx).powi(2) + (ys - cy).powi(2)) / (2.0 * s2)).exp()).sum();
            v.push(s as f32);
        }
    }
    Tensor::new([size, size], v).expect("texture")
}

fn interior_mse(a: &Tensor<f32>, b: &Tensor<f32>, border: usize) -> f64 {
    let n = a.shape()[0];
    let mut s = 0.0;
    for y in border..n - border {
        for x in border..n - border {
            s += (f64::from(a.at(&[y, x])) - f64::from(b.at(&[y, x]))).powi(2);
        }
    }
    s / ((n - 2 * border) * (n - 2 * border)) as f64
}

fn registration() -> Outcome {
    let t = Instant::now();
    let cfg = RegistrationConfig::default();
    let reference = texture(64, 0.0, 0.0);
    // the target's content sits one pixel to the left, so the aligning field is (−1, 0)
    let target = texture(64, 1.0, 0.0);
    let flow = register_frame(&target, &reference, &cfg).expect("register");
    let epe = flow.w.data().chunks_exact(2).map(|d| ((d[0] + 1.0).powi(2) + d[1].powi(2)).sqrt()).sum::<f64>() / (64.0 * 64.0);
    let warped = apply_flow(&target, &flow).expect("warp");
    let (before, after) = (interior_mse(&target, &reference, 2), interior_mse(&warped, &reference, 2));

    // a 32-frame stack with mixed sub-pixel drifts, the size of one neural window
    let frames: Vec<Tensor<f32>> = (0..32).map(|i| texture(64, 0.05 * (i % 7) as f64, -0.04 * (i % 5) as f64)).collect();
    register_stack(&Tensor::stack(&frames).expect("stack"), 0, &cfg).expect("stack registration");
    let elapsed = t.elapsed();

    let pass = epe <= 0.5 && after <= 0.1 * before && elapsed <= Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "mean endpoint error {epe:.1e} px, residual MSE {:.2e}% of unregistered, {:.1}s for 1 + 32 frames at 64×64",
            100.0 * after / before,
            elapsed.as_secs_f64()
        ),
    )
}

fn directional_ablation(ds: &Dataset) -> Outcome {
    let t = Instant::now();
    let table = run_ablation(ds, &base_config(), &ABLATION_SEEDS, &EvalOptions::default()).expect("ablation");
    let elapsed = t.elapsed();
    let d = |r| table.delta(r).expect("rung delta");
    let (swap, calcium, mix) = (d(Rung::Swap), d(Rung::Calcium), d(Rung::Mix));
    let pass = swap.identity <= -20.0
        && swap.across >= 5.0
        && calcium.across >= 0.0
        && mix.across >= 0.0
        && elapsed <= Duration::from_secs(45 * 60);
    outcome(
        pass,
        format!(
            "+swap identity {:+.1} across {:+.1}; +calcium across {:+.1}; +mix across {:+.1} (points, {} seeds); {:.0}s",
            swap.identity,
            swap.across,
            calcium.across,
            mix.across,
            ABLATION_SEEDS.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn gap_holds(reports: &[BenchmarkReport]) -> bool {
    let (single, across, identity) =
        (by_task(reports, Task::Single).mean, by_task(reports, Task::Across).mean, by_task(reports, Task::Identity).mean);
    identity >= 0.9 && across <= single - 0.15
}

fn domain_gap(ds: &Dataset) -> Outcome {
    let base = base_config();
    let opts = EvalOptions::default();
    let raw = evaluate_raw(ds, base.window, base.split, NeuralInput::default(), &Task::ALL, &opts).expect("raw probes");
    let supervised_cfg = TrainConfig { method: Method::Supervised, ..base };
    let supervised = train(ds, &supervised_cfg).expect("supervised training");
    let sup = evaluate(&supervised, ds, &Task::ALL, &opts).expect("supervised probes");
    outcome(gap_holds(&raw) && gap_holds(&sup), format!("raw: {}; supervised: {}", summary(&raw), summary(&sup)))
}

fn chance_level(ds: &Dataset) -> Outcome {
    let base = base_config();
    let opts = EvalOptions { shuffle_labels: true, ..Default::default() };
    let model = train(ds, &TrainConfig { epochs: 2, steps_per_epoch: Some(10), ..base.clone() }).expect("training");
    let mut reports = evaluate(&model, ds, &Task::ALL, &opts).expect("encoded probes");
    reports.extend(evaluate_raw(ds, base.window, base.split, NeuralInput::default(), &Task::ALL, &opts).expect("raw probes"));
    let worst = reports.iter().map(|r| (r.mean - r.chance).abs()).fold(0.0, f64::max);
    let listed = reports.iter().map(|r| format!("{} {:.1}/{:.1}", r.task, 100.0 * r.mean, 100.0 * r.chance)).collect::<Vec<_>>();
    outcome(worst <= 0.05, format!("accuracy/chance: {}; worst gap {:.1} points", listed.join(", "), 100.0 * worst))
}

fn determinism(ds: &Dataset) -> Outcome {
    let cfg = TrainConfig { epochs: 2, steps_per_epoch: Some(10), seed: 7, ..base_config() };
    let (a, b) = (train(ds, &cfg).expect("run a"), train(ds, &cfg).expect("run b"));
    let bits = |m: &neuroswap::harness::Trained| m.log.iter().map(|l| l.loss.to_bits()).collect::<Vec<_>>();
    let same_log = a.log == b.log && bits(&a) == bits(&b);
    let opts = EvalOptions::default();
    let ra = evaluate(&a, ds, &Task::ALL, &opts).expect("eval a");
    let rb = evaluate(&b, ds, &Task::ALL, &opts).expect("eval b");
    par::set_sequential(true);
    let rs = evaluate(&a, ds, &Task::ALL, &opts).expect("sequential eval");
    par::set_sequential(false);
    let pass = same_log && ra == rb && ra == rs;
    outcome(
        pass,
        format!(
            "{} logged steps identical: {same_log}; reports identical: {} (sequential: {})",
            a.log.len(),
            ra == rb,
            ra == rs
        ),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |k: usize| selected.is_empty() || selected.contains(&k);
    let needs_world = [4, 5, 6, 7].iter().any(|&k| wanted(k));
    let world = needs_world.then(standard_world);
    let ds = || world.as_ref().expect("world generated");

    let criteria: [(usize, &str, &dyn Fn() -> Outcome); 7] = [
        (1, "gradient suite", &gradient_suite),
        (2, "exact-value oracles", &exact_oracles),
        (3, "registration", &registration),
        (4, "directional ablation", &|| directional_ablation(ds())),
        (5, "domain-gap control", &|| domain_gap(ds())),
        (6, "chance level with shuffled labels", &|| chance_level(ds())),
        (7, "determinism", &|| determinism(ds())),
    ];
    let mut failures = 0;
    for (k, name, run) in criteria {
        if !wanted(k) {
            continue;
        }
        let o = run();
        failures += usize::from(!o.pass);
        println!("criterion {k} ({name}): {} — {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
