use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use neuroswap::augment::{AugmentConfig, Augmenter};
use neuroswap::par;
use neuroswap::preprocess::{register_stack, RegistrationConfig};
use neuroswap::synthdata::{generate_world, Split, SplitPolicy, WindowSpec, WorldConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn small_world() -> WorldConfig {
    WorldConfig { height: 16, width: 16, trials_per_domain: 2, trial_seconds: 10.0, blob_sigma_px: 1.5, ..Default::default() }
}

/// Runs `f` once per mode under the same benchmark group.
fn both<F: FnMut()>(c: &mut Criterion, group: &str, mut f: F) {
    let mut g = c.benchmark_group(group);
    for mode in ["parallel", "sequential"] {
        par::set_sequential(mode == "sequential");
        g.bench_function(BenchmarkId::from_parameter(mode), |b| b.iter(&mut f));
    }
    par::set_sequential(false);
    g.finish();
}

fn world_generation(c: &mut Criterion) {
    let cfg = small_world();
    both(c, "generate_world", || {
        generate_world(&cfg, 7).unwrap();
    });
}

fn augment_batch(c: &mut Criterion) {
    let ds = generate_world(&small_world(), 7).unwrap();
    let window = WindowSpec::default();
    let split = Split::new(&ds, window, SplitPolicy::default()).unwrap();
    let aug = Augmenter::new(&ds, &split.train, window.neural_frames, AugmentConfig::default()).unwrap();
    let ids: Vec<usize> = (0..128).map(|i| i % split.train.len()).collect();
    let mut step = 0;
    both(c, "augment_batch_128", || {
        step += 1;
        aug.batch(&ids, 3, step).unwrap();
    });
}

fn registration(c: &mut Criterion) {
    let cfg = WorldConfig { height: 32, width: 32, trials_per_domain: 1, trial_seconds: 2.0, n_domains: 2, ..small_world() };
    let ds = generate_world(&cfg, 7).unwrap();
    let stack = &ds.trials[0].neural;
    let reg = RegistrationConfig::default();
    both(c, "register_stack_32x32", || {
        register_stack(stack, 0, &reg).unwrap();
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = world_generation, augment_batch, registration
}
criterion_main!(benches);
