//! Kernel timings on a single-thread rayon pool versus the default pool.
//! Build with `--no-default-features` to time the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use region_dit_core::attention::{cross_attention, region_attention, AttentionMode, CrossAttnWeights};
use region_dit_core::dit::{Conditioning, Stack, StackConfig};
use region_dit_core::regions::{divide_regions, Axis, LatentGrid, RegionSpec};
use region_dit_core::rng::NormalStream;
use region_dit_core::tensor::{matmul, seeded_normal};
use region_dit_core::text::{TextState, STATE_LEN};
use region_dit_core::RngSeed;

fn pools() -> Vec<(&'static str, Option<rayon::ThreadPool>)> {
    let mut out = vec![("default", None)];
    if region_dit_core::par::is_parallel() {
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool");
        out.push(("1-thread", Some(one)));
    }
    out
}

fn run_in<R: Send>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> R + Send) -> R {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

fn label() -> &'static str {
    if region_dit_core::par::is_parallel() {
        "rayon"
    } else {
        "sequential"
    }
}

fn bench_matmul(c: &mut Criterion) {
    let a = seeded_normal(vec![1024, 64], RngSeed(1), 1.0).unwrap();
    let b = seeded_normal(vec![64, 256], RngSeed(2), 1.0).unwrap();
    let mut g = c.benchmark_group(format!("matmul_1024x64x256/{}", label()));
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| run_in(&pool, || matmul(&a, &b).unwrap()))
        });
    }
    g.finish();
}

fn bench_attention(c: &mut Criterion) {
    let d = 64;
    let w = CrossAttnWeights::seeded(d, 4, 16, &mut NormalStream::new(RngSeed(3)), 0.1).unwrap();
    let latent = seeded_normal(vec![1024, d], RngSeed(4), 1.0).unwrap();
    let states: Vec<_> = (0..4)
        .map(|i| seeded_normal(vec![STATE_LEN, d], RngSeed(10 + i), 1.0).unwrap())
        .collect();
    let masks = divide_regions(
        RegionSpec { axis: Axis::Height, count: 4 },
        LatentGrid::new(32, 32).unwrap(),
    )
    .unwrap();
    let mut g = c.benchmark_group(format!("cross_attention_1024x333/{}", label()));
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new("standard", name), |bch| {
            bch.iter(|| run_in(&pool, || cross_attention(&latent, &states[0], &w).unwrap()))
        });
        for mode in [AttentionMode::RegionOutputMasked, AttentionMode::RegionLiteral] {
            let id = BenchmarkId::new(format!("{mode:?}"), name);
            g.bench_function(id, |bch| {
                bch.iter(|| run_in(&pool, || region_attention(&latent, &masks, &states, &w, mode).unwrap()))
            });
        }
    }
    g.finish();
}

fn bench_stack(c: &mut Criterion) {
    let cfg = StackConfig {
        num_blocks: 4,
        injected: (0..4).collect(),
        ..StackConfig::default()
    };
    let d = cfg.d_model;
    let stack = Stack::build(cfg).unwrap();
    let state = |s| TextState::new(seeded_normal(vec![STATE_LEN, d], RngSeed(s), 1.0).unwrap()).unwrap();
    let cond = Conditioning::new(vec![state(1), state(2)], state(3), state(4)).unwrap();
    let masks = divide_regions(
        RegionSpec { axis: Axis::Height, count: 2 },
        LatentGrid::new(32, 32).unwrap(),
    )
    .unwrap();
    let latent = seeded_normal(vec![1024, d], RngSeed(5), 1.0).unwrap();
    let mut g = c.benchmark_group(format!("stack_forward_4_blocks/{}", label()));
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |bch| {
            bch.iter(|| run_in(&pool, || stack.forward(&latent, 0.5, &cond, &masks).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_matmul, bench_attention, bench_stack);
criterion_main!(benches);
