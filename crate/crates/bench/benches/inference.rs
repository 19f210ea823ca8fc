use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gridgp::{
    cross_corr, fit_alpha, make_mask, measure, mode_kernel, sample_covs, simulate, woodbury_solve, ChannelSpec,
    CovarianceModel, Filtering, KernelQuantity, MaskPolicy, MeasurementPipeline, MomOptions, NoiseSpec, Quantity, Scenario,
};
use gridgp_bench::{fixture, speeds};
use nalgebra::{DMatrix, DVector};
use std::hint::black_box;

fn low_rank_vs_dense(c: &mut Criterion) {
    let mut g = c.benchmark_group("measured_solve");
    g.sample_size(10);
    for &(n, d) in &[(600, 6), (2400, 6)] {
        let b = DMatrix::from_fn(n, d, |i, j| ((i * 7 + j * 3) as f64 * 0.37).sin());
        let k = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.1 });
        let s2 = DVector::from_element(n, 0.05);
        let rhs = DMatrix::from_fn(n, 1, |i, _| (i as f64 * 0.11).cos());
        g.bench_with_input(BenchmarkId::new("woodbury", n), &n, |bch, _| {
            bch.iter(|| woodbury_solve(black_box(&b), &k, &s2, &rhs).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("dense", n), &n, |bch, _| {
            bch.iter(|| {
                let full = &b * &k * b.transpose() + DMatrix::from_diagonal(&s2);
                full.cholesky().unwrap().solve(black_box(&rhs))
            })
        });
    }
    g.finish();
}

fn assemble(c: &mut Criterion) {
    let f = fixture(20);
    let cov = CovarianceModel::new(&f.model, &f.space, &f.alpha, None).unwrap();
    let mut g = c.benchmark_group("assemble");
    g.sample_size(10);
    for &len in &[150, 300] {
        let sel = speeds(10, len, 0.005);
        g.bench_with_input(BenchmarkId::from_parameter(len), &len, |bch, _| {
            bch.iter(|| cov.assemble(black_box(&sel), &sel, Filtering::None).unwrap())
        });
    }
    g.finish();
}

fn kernels(c: &mut Criterion) {
    let speed = mode_kernel(40.0, 0.5, None, KernelQuantity::Speed).unwrap();
    let other = mode_kernel(25.0, 0.5, None, KernelQuantity::Speed).unwrap();
    c.bench_function("cross_corr", |bch| bch.iter(|| cross_corr(black_box(&speed), &other, black_box(0.4)).unwrap()));
}

fn moment_fit(c: &mut Criterion) {
    let f = fixture(12);
    let sc = Scenario::ambient(0.02, 300.0, 3).with_dt(1.0 / 1500.0).with_stride(100);
    let truth = simulate(&f.model, &sc, None).unwrap();
    let channels: Vec<ChannelSpec> = (0..8).map(|b| ChannelSpec::new(b, Quantity::Speed, 0.005)).collect();
    let pipe = MeasurementPipeline {
        speed_noise_std: 0.005,
        ..MeasurementPipeline::default()
    };
    let data = measure(&truth, &pipe, &channels).unwrap();
    let covs = sample_covs(&data, &[0, 1, 2]).unwrap();
    let mask = make_mask(&f.space, MaskPolicy::Diagonal);
    let noise = NoiseSpec::from_channels(&channels);
    c.bench_function("fit_alpha", |bch| {
        bch.iter(|| fit_alpha(black_box(&covs), &f.model, &f.space, &mask, &noise, &channels, MomOptions::default()).unwrap())
    });
}

criterion_group!(benches, low_rank_vs_dense, assemble, kernels, moment_fit);
criterion_main!(benches);
