use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use road_bench::{bandit, rng, small_run_config, sources};
use road_core::harness::run_single;
use road_core::replay::sample_mixed;
use road_core::theory::GradientFixture;

fn bench_select_arm(c: &mut Criterion) {
    let mut group = c.benchmark_group("select_arm");
    for window in [10, 1000] {
        let state = bandit(2000, window);
        group.bench_with_input(BenchmarkId::from_parameter(window), &state, |b, s| {
            b.iter(|| s.select_arm().unwrap())
        });
    }
    group.finish();
}

fn bench_sample_mixed(c: &mut Criterion) {
    let (offline, online) = sources(10_000, 5_000);
    let mut r = rng(2);
    c.bench_function("sample_mixed/256", |b| {
        b.iter(|| sample_mixed(&offline, &online, 0.3, 256, &mut r).unwrap())
    });
}

fn bench_gradient(c: &mut Criterion) {
    let fx = GradientFixture::random(&mut rng(3), 1e-8).unwrap();
    c.bench_function("outer_gradient_m", |b| b.iter(|| fx.gradient().unwrap()));
}

fn bench_run(c: &mut Criterion) {
    let cfg = small_run_config();
    let mut group = c.benchmark_group("run");
    group.sample_size(10);
    group.bench_function("chain_road_500", |b| {
        b.iter(|| run_single(&cfg, 0).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_select_arm,
    bench_sample_mixed,
    bench_gradient,
    bench_run
);
criterion_main!(benches);
