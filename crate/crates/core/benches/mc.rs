use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dropvar::harness::{run_head_comparison, run_prop34_sweep, HeadCompareConfig, Prop34SweepConfig};
use dropvar::{Execution, KeepProb};

fn head(c: &mut Criterion) {
    let mut group = c.benchmark_group("head_comparison");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        let cfg = HeadCompareConfig {
            spatial_size: 49,
            batch_size: 20_000,
            repetitions: 1,
            exec,
            ..Default::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &cfg, |b, cfg| {
            b.iter(|| run_head_comparison(cfg).unwrap())
        });
    }
    group.finish();
}

fn residual_sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("residual_sweep");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        let cfg = Prop34SweepConfig {
            keep_probs: vec![KeepProb::new(0.5).unwrap(), KeepProb::new(0.9).unwrap()],
            var_x0_values: vec![1.0, 4.0],
            width: 64,
            batch_size: 20_000,
            repetitions: 1,
            exec,
            ..Default::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &cfg, |b, cfg| {
            b.iter(|| run_prop34_sweep(cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, head, residual_sweep);
criterion_main!(benches);
