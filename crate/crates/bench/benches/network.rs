use std::hint::black_box;

use criterion::{criterion_group, Criterion};
use ssdm_bench::{acquisition, small_net};
use ssdm_core::denoiser::{network_gradient, LossSpec, TrainSample};
use ssdm_core::kspace::zero_fill;
use ssdm_core::schedule::sample_noise;

fn forward(c: &mut Criterion) {
    let net = small_net();
    let acq = acquisition(32);
    let x_cond = zero_fill(&acq.y, &acq.mask).unwrap();
    let x_t = sample_noise(32, 32, 4);
    c.bench_function("net/predict/32", |b| b.iter(|| net.predict(black_box(&x_cond), &x_t, 0.5)));
}

fn gradient(c: &mut Criterion) {
    let net = small_net();
    let acq = acquisition(32);
    let sample = TrainSample {
        x_cond: zero_fill(&acq.y, &acq.mask).unwrap(),
        x_t: sample_noise(32, 32, 4),
        gamma_bar: 0.5,
        target_v: sample_noise(32, 32, 5),
        dc: None,
    };
    let batch = vec![sample; 8];
    let mut group = c.benchmark_group("net/gradient");
    group.sample_size(10);
    group.bench_function("batch8/32", |b| b.iter(|| network_gradient(&net, black_box(&batch), &LossSpec::default())));
    group.finish();
}

criterion_group!(benches, forward, gradient);
