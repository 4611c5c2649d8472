use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use dptr_bench::model;
use dptr_core::bootstrap::{
    continuity_bootstrap_test, grid_bootstrap_at, nonparametric_bootstrap_ci, BootstrapConfig,
    BootstrapContext,
};
use dptr_core::stats::sup_wald;
use dptr_core::{simulate_panel, DgpConfig};

fn simulation(c: &mut Criterion) {
    let cfg = DgpConfig::default();
    c.bench_function("simulate_panel/n400", |b| {
        b.iter(|| simulate_panel(black_box(&cfg), 1).unwrap())
    });
}

fn estimation(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit_unrestricted");
    for (n, points) in [(400, 21), (400, 81), (1600, 81)] {
        let m = model(n, points, 1);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("n{n}_grid{points}")),
            &m,
            |b, m| b.iter(|| m.fit_unrestricted().unwrap()),
        );
    }
    group.finish();

    let m = model(400, 21, 1);
    let fit = m.fit_unrestricted().unwrap();
    c.bench_function("fit_continuity_restricted/n400", |b| {
        b.iter(|| m.fit_continuity_restricted(&fit).unwrap())
    });
    c.bench_function("sup_wald/n400_grid21", |b| b.iter(|| sup_wald(&m).unwrap()));
}

fn bootstrap(c: &mut Criterion) {
    let m = model(400, 21, 1);
    let fit = m.fit_unrestricted().unwrap();
    let kink = m.fit_continuity_restricted(&fit).unwrap();
    let ctx = BootstrapContext::new(&m, &fit).unwrap();
    let cfg = BootstrapConfig {
        b: 50,
        ..BootstrapConfig::default()
    };
    let mut group = c.benchmark_group("bootstrap_B50_n400");
    group.sample_size(10);
    group.bench_function("grid_point", |b| {
        b.iter(|| grid_bootstrap_at(&ctx, &cfg, &[10]).unwrap())
    });
    group.bench_function("nonparametric", |b| {
        b.iter(|| nonparametric_bootstrap_ci(&ctx, &cfg).unwrap())
    });
    group.bench_function("continuity_test", |b| {
        b.iter(|| continuity_bootstrap_test(&ctx, &kink, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, simulation, estimation, bootstrap);
criterion_main!(benches);
