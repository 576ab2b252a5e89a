use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fmpa_core::aggregation::{self, DncParams};
use fmpa_core::AggregationContext;
use fmpa_core::AggregatorSpec;
use std::hint::black_box;

fn rules(c: &mut Criterion) {
    let n = 50;
    let m = 10;
    let d = 2_000;
    let ups = fmpa_bench::updates(n, d, 3);
    let ctx = AggregationContext::default();
    let specs = [
        AggregatorSpec::Fedavg,
        AggregatorSpec::Krum { m },
        AggregatorSpec::Mkrum { m, selection: None },
        AggregatorSpec::Median,
        AggregatorSpec::Trmean { beta: m },
        AggregatorSpec::NormBounding,
        AggregatorSpec::Bulyan { m, selection: None },
        AggregatorSpec::Faba { m },
        AggregatorSpec::Afa { threshold: 2.0, max_passes: 10 },
        AggregatorSpec::Cc { iterations: 3, radius: 1.0 },
        AggregatorSpec::Dnc { m, subsample_dim: Some(1_000), filter_coef: 1.0, power_iters: 30 },
    ];
    let mut group = c.benchmark_group("aggregate_n50_d2000");
    group.sample_size(10);
    for spec in &specs {
        group.bench_with_input(BenchmarkId::from_parameter(spec.name()), spec, |b, s| {
            b.iter(|| s.aggregate(black_box(&ups), &ctx).unwrap())
        });
    }
    group.finish();
}

fn dnc_scaling(c: &mut Criterion) {
    let mut group = c.benchmark_group("dnc_dim");
    group.sample_size(10);
    for d in [500usize, 5_000, 20_000] {
        let ups = fmpa_bench::updates(30, d, 5);
        let p = DncParams { m: 6, subsample_dim: d / 2, filter_coef: 1.0, power_iters: 30, seed: 1 };
        group.bench_with_input(BenchmarkId::from_parameter(d), &ups, |b, u| b.iter(|| aggregation::dnc(black_box(u), &p).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, rules, dnc_scaling);
criterion_main!(benches);
