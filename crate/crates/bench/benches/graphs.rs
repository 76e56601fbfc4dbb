use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use mllc_bench::CASES;
use mllc_core::clg::{build_clg_affinity, normalize_clg, ClgOptions};
use mllc_core::refine::refine;
use mllc_core::slg::{build_slg_affinity, normalize_symmetric};

fn slg(c: &mut Criterion) {
    let mut g = c.benchmark_group("slg_build");
    g.sample_size(10);
    for case in CASES {
        let (f, _) = case.inputs();
        let params = case.config().slg_params();
        g.bench_with_input(BenchmarkId::from_parameter(case.label()), &f, |b, f| {
            b.iter(|| normalize_symmetric(&build_slg_affinity(black_box(f), &params).unwrap()))
        });
    }
    g.finish();
}

fn clg(c: &mut Criterion) {
    let mut g = c.benchmark_group("clg_build");
    g.sample_size(10);
    for case in CASES {
        let (_, p) = case.inputs();
        let opts = ClgOptions {
            class_cap: Some(1024),
            seed: 0,
            exclude: None,
        };
        g.bench_with_input(BenchmarkId::from_parameter(case.label()), &p, |b, p| {
            b.iter(|| normalize_clg(&build_clg_affinity(black_box(p), &opts)))
        });
    }
    g.finish();
}

fn refine_call(c: &mut Criterion) {
    let mut g = c.benchmark_group("refine");
    g.sample_size(10);
    for case in CASES {
        let (f, p) = case.inputs();
        let (cfg, layers) = (case.config(), case.layers());
        g.bench_function(BenchmarkId::from_parameter(case.label()), |b| {
            b.iter(|| refine(black_box(&f), &p, &p, &cfg, &layers).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, slg, clg, refine_call);
criterion_main!(benches);
