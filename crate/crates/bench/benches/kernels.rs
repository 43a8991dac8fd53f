use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flowgs_core::diffarray::ParamStore;
use flowgs_core::flowcore::{euler_sample, ConvVelocityNet};
use flowgs_core::gsfield::{GaussianRenderer, RenderConfig};
use flowgs_core::imaging::{bicubic_resize, synth_dataset};
use flowgs_core::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn render(c: &mut Criterion) {
    let r = GaussianRenderer::new(
        "render",
        RenderConfig {
            kernels: 100,
            channels: 16,
            out_channels: 3,
            window: 7,
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    r.init(&mut store, &mut rng);
    let field = Tensor::randn(&[1, 16, 64, 64], &mut rng);
    c.bench_function("render_windowed_64x64", |b| {
        b.iter(|| {
            let g = Graph::new();
            black_box(r.forward(&g, &store.frozen(), g.constant(field.clone())).unwrap());
        })
    });
    c.bench_function("render_forward_backward_64x64", |b| {
        b.iter(|| {
            let g = Graph::new();
            let f = g.variable(field.clone());
            let out = r.forward(&g, &store.trainable(), f).unwrap();
            g.backward(g.mean(out)).unwrap();
        })
    });
}

fn sampling(c: &mut Criterion) {
    let net = ConvVelocityNet::new("vel", 8, 8, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    net.init(&mut store, &mut rng);
    let z0 = Tensor::randn(&[1, 8, 8, 8], &mut rng);
    let cond = Tensor::randn(&[1, 8, 8, 8], &mut rng);
    let mut group = c.benchmark_group("euler_sample");
    for nfe in [1usize, 4, 16] {
        group.bench_with_input(BenchmarkId::from_parameter(nfe), &nfe, |b, &n| {
            b.iter(|| black_box(euler_sample(&net, &store.frozen(), &z0, Some(&cond), n).unwrap()))
        });
    }
    group.finish();
}

fn resampling(c: &mut Criterion) {
    let img = synth_dataset(2, 1, 64).unwrap().remove(0);
    c.bench_function("bicubic_64_to_160", |b| b.iter(|| black_box(bicubic_resize(&img, 160, 160).unwrap())));
}

criterion_group!(benches, render, sampling, resampling);
criterion_main!(benches);
