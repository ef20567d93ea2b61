use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use qatkit::quant::{duq_backward, duq_forward, QuantMode, QuantParams};
use qatkit::tensor::kernels::{conv2d, ConvSpec, HSWISH_MIN};
use qatkit_bench::{quantized_trainer, uniform};

fn conv(c: &mut Criterion) {
    let x = uniform(&[32, 16, 16, 16], 1);
    let full = uniform(&[32, 16, 3, 3], 2);
    let dw = uniform(&[16, 1, 3, 3], 3);
    let spec = ConvSpec::new(1, 1);
    c.bench_function("conv2d 3x3 16->32 16x16 b32", |b| {
        b.iter(|| conv2d(black_box(&x), &full, None, &spec).unwrap())
    });
    let dspec = spec.groups(16).pad_value(HSWISH_MIN);
    c.bench_function("depthwise 3x3 16ch 16x16 b32 negpad", |b| {
        b.iter(|| conv2d(black_box(&x), &dw, None, &dspec).unwrap())
    });
}

fn duq(c: &mut Criterion) {
    let x = uniform(&[1 << 16], 4);
    let up = uniform(&[1 << 16], 5);
    let q = QuantParams::from_scales(1.6, -0.8, 1.6, -0.8, 16, QuantMode::Asymmetric).unwrap();
    c.bench_function("duq forward 64k", |b| b.iter(|| duq_forward(black_box(&x), &q)));
    c.bench_function("duq backward 64k", |b| b.iter(|| duq_backward(black_box(&x), &q, &up)));
}

fn train_step(c: &mut Criterion) {
    let (mut trainer, data) = quantized_trainer(0);
    let images = data.images.slice_outer(0, 32);
    let labels = data.labels[..32].to_vec();
    c.bench_function("w4a4 training step b32", |b| {
        b.iter(|| trainer.step(black_box(&images), &labels, 1e-4).unwrap())
    });
}

criterion_group!(benches, conv, duq, train_step);
criterion_main!(benches);
