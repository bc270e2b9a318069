use std::hint::black_box;

use criterion::{criterion_group, BenchmarkId, Criterion};
use ssdm_bench::acquisition;
use ssdm_core::kspace::{apply_dc, fft2c};
use ssdm_core::masks::make_mask;
use ssdm_core::{MaskKind, MaskSpec};

fn transforms(c: &mut Criterion) {
    let mut group = c.benchmark_group("fft2c");
    for size in [32, 128, 320] {
        let acq = acquisition(size);
        group.bench_with_input(BenchmarkId::from_parameter(size), &acq.x0, |b, x| b.iter(|| fft2c(black_box(x))));
    }
    group.finish();
}

fn data_consistency(c: &mut Criterion) {
    let acq = acquisition(320);
    c.bench_function("apply_dc/320", |b| b.iter(|| apply_dc(black_box(&acq.x0), &acq.y, &acq.mask)));
}

fn masks(c: &mut Criterion) {
    let mut group = c.benchmark_group("make_mask/320");
    group.sample_size(10);
    for kind in [MaskKind::Gaussian1d, MaskKind::Gaussian2d, MaskKind::Poisson2d] {
        let spec = MaskSpec::new(kind, 8.0, if kind.is_1d() { 12 } else { 8 }, 1);
        group.bench_function(kind.as_str(), |b| b.iter(|| make_mask(black_box(&spec), 320, 320)));
    }
    group.finish();
}

criterion_group!(benches, transforms, data_consistency, masks);
