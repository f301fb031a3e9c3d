use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use splitfed_core::orchestrator::{self, RunConfig, TrainingStrategy};

/// A fixed 64-sample budget per run, split across the clients.
fn strategies(c: &mut Criterion) {
    let mut g = c.benchmark_group("strategy, 64 samples");
    g.sample_size(10);
    for m in [1usize, 2, 4] {
        for s in TrainingStrategy::ALL {
            let cfg = RunConfig {
                strategy: s,
                clients: m,
                steps: (64 / m) as u64,
                key_bits: 512,
                ..RunConfig::default()
            };
            g.bench_with_input(BenchmarkId::new(format!("{s:?}"), m), &cfg, |b, cfg| {
                b.iter(|| orchestrator::run(cfg).unwrap())
            });
        }
    }
    g.finish();
}

criterion_group!(benches, strategies);
criterion_main!(benches);
