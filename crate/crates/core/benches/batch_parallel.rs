use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use handfirst::denoiser::{Denoiser, DenoiserConfig};
use handfirst::metrics::{extract_all, RandomProjection};
use handfirst::nn::ParamStore;
use handfirst::synth::{generate_hands, DataConfig};
use handfirst::{ExecMode, Tensor4};

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn denoiser_forward(c: &mut Criterion) {
    let cfg = DenoiserConfig {
        base_channels: 16,
        emb_dim: 64,
        ..DenoiserConfig::default()
    };
    let mut store = ParamStore::<f32>::new();
    let net = Denoiser::new(&cfg, &mut store, 0).unwrap();
    let b = 8;
    let x = Tensor4::full([b, 3, 32, 32], 0.1);
    let cond = Tensor4::zeros([b, 11, 32, 32]);
    let (t, style) = (vec![50; b], vec![1; b]);

    let mut group = c.benchmark_group("denoiser_forward_b8");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |bench, &mode| {
            bench.iter(|| black_box(net.predict(&store, &x, &t, &cond, &style, mode).unwrap()))
        });
    }
    group.finish();
}

fn hand_rendering(c: &mut Criterion) {
    let cfg = DataConfig {
        n: 64,
        hand_size: 32,
        ..DataConfig::default()
    };
    let mut group = c.benchmark_group("render_64_hands");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |bench, &mode| {
            bench.iter(|| black_box(generate_hands(&cfg, mode).unwrap()))
        });
    }
    group.finish();
}

fn feature_extraction(c: &mut Criterion) {
    let extractor = RandomProjection::new(64, 0);
    let images: Vec<Tensor4> = (0..128)
        .map(|i| Tensor4::from_fn([1, 3, 48, 32], |[_, ch, y, x]| ((i + ch * 7 + y * 3 + x) % 17) as f32 / 17.0))
        .collect();
    let mut group = c.benchmark_group("features_128_images");
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |bench, &mode| {
            bench.iter(|| black_box(extract_all(&extractor, &images, mode).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, denoiser_forward, hand_rendering, feature_extraction);
criterion_main!(benches);
