use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use koa_core::diffusion::{build_schedule, ddim_step, Denoiser, UNet, UNetConfig};
use koa_core::imaging::{clahe, resize, ClaheParams, GrayImage, ResampleFilter};
use koa_core::nngraph::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

fn image(size: usize, seed: u64) -> GrayImage {
    GrayImage::new(size, size, noise(size * size, seed)).unwrap()
}

fn imaging(c: &mut Criterion) {
    let img = image(224, 1);
    let params = ClaheParams::default();
    c.bench_function("clahe_224", |b| b.iter(|| clahe(black_box(&img), &params).unwrap()));

    let small = image(16, 2);
    c.bench_function("resize_16_64_32", |b| {
        b.iter(|| {
            let up = resize(black_box(&small), 64, 64, ResampleFilter::Lanczos3).unwrap();
            resize(&up, 32, 32, ResampleFilter::Lanczos3).unwrap()
        })
    });
}

fn autodiff(c: &mut Criterion) {
    let x = Tensor::new(&[8, 16, 32, 32], noise(8 * 16 * 32 * 32, 3)).unwrap();
    let k = Tensor::new(&[16, 16, 3, 3], noise(16 * 16 * 9, 4)).unwrap();
    c.bench_function("conv2d_fwd_bwd_8x16x32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let kv = tape.leaf(k.clone(), true);
            let y = tape.conv2d(xv, kv, 1, 1).unwrap();
            let loss = tape.sum(y);
            tape.backward(loss).unwrap()
        })
    });
}

fn diffusion(c: &mut Criterion) {
    let schedule = build_schedule(1000).unwrap();
    let model = UNet::new(UNetConfig { base_channels: 16, time_dim: 64 }, 5).unwrap();
    let x = Tensor::new(&[1, 1, 16, 16], noise(256, 6)).unwrap();
    c.bench_function("unet_forward_16", |b| {
        b.iter(|| model.predict_noise(black_box(&x), &[500]).unwrap())
    });
    let eps = noise(256, 7);
    c.bench_function("ddim_step_16", |b| {
        b.iter(|| ddim_step(&schedule, black_box(x.data()), &eps, 500, 450, 0.0, None).unwrap())
    });
}

criterion_group!(benches, imaging, autodiff, diffusion);
criterion_main!(benches);
