use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use f2hdr::coarseflow::{classical_flow, HornSchunckConfig};
use f2hdr::motionphys::build_mask;
use f2hdr::nnkit::{conv2d_backward, conv2d_forward, ConvSpec, Tensor4};
use f2hdr::pipeline::{Model, ModelConfig};
use f2hdr::stage1::backward_warp;
use f2hdr::tensorio::{FlowField, ImagePlane};
use f2hdr::trainer::{build_dataset, sample_gradient, TrainConfig};

fn texture(n: usize, phase: f32) -> ImagePlane {
    ImagePlane::from_fn(n, n, 3, |y, x, c| {
        0.4 + 0.3 * ((x as f32 + phase) * 0.3).sin() * (y as f32 * 0.2 + c as f32).cos()
    })
}

fn conv(c: &mut Criterion) {
    for (cin, cout) in [(16, 16), (48, 16), (96, 32)] {
        let x = Tensor4::<f32>::filled(1, cin, 64, 64, 0.3);
        let spec = ConvSpec::new(cin, cout, 3);
        let w = vec![0.01f32; spec.weight_len()];
        let b = vec![0.0f32; cout];
        let g = Tensor4::<f32>::filled(1, cout, 64, 64, 0.1);
        c.bench_function(&format!("conv3x3 {cin}->{cout} 64x64 forward"), |bch| {
            bch.iter(|| conv2d_forward(black_box(&x), &w, &b, &spec).unwrap())
        });
        c.bench_function(&format!("conv3x3 {cin}->{cout} 64x64 backward"), |bch| {
            bch.iter(|| conv2d_backward(black_box(&g), &x, &w, &spec).unwrap())
        });
    }
}

fn warp_and_mask(c: &mut Criterion) {
    let img = texture(128, 0.0);
    let flow = FlowField::from_fn(128, 128, |y, x| (0.01 * x as f32 - 0.5, 0.02 * y as f32));
    c.bench_function("backward_warp 128x128", |b| {
        b.iter(|| backward_warp(black_box(&img), &flow).unwrap())
    });
    let model = Model::init(ModelConfig::default(), 0).unwrap();
    c.bench_function("motion mask 128x128", |b| {
        b.iter(|| build_mask(black_box(&flow), &model.params).unwrap())
    });
}

fn coarse_flow(c: &mut Criterion) {
    let (a, b) = (texture(64, 0.0), texture(64, 1.5));
    let cfg = HornSchunckConfig::default();
    c.bench_function("classical flow 64x64", |bch| {
        bch.iter(|| classical_flow(black_box(&a), &b, &cfg).unwrap())
    });
}

fn training_sample(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    let data = build_dataset(&cfg, 1, 0).unwrap();
    let model = Model::init(cfg.model.clone(), 0).unwrap();
    let mut grads = model.params.zeros_like();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("forward+backward one 64x64 window", |b| {
        b.iter(|| {
            sample_gradient(&cfg.model, &model.params, &data[0].inputs, &data[0].gt, cfg.mu, &mut grads).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, conv, warp_and_mask, coarse_flow, training_sample);
criterion_main!(benches);
