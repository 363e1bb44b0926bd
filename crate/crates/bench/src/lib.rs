use std::hint::black_box;

use criterion::{BenchmarkId, Criterion, Throughput};
use partfield::codebook::build_codebook;
use partfield::descriptors::extract_descriptors;
use partfield::geometry::{farthest_point_sample, generate_object, Category};
use partfield::losses::{loss_and_gradients, LabeledFeatureBatch, LossConfig};
use partfield::mat::Mat;
use partfield::policy::{
    init_policy, sample_actions, Observation, PolicyConfig, SamplerMode, SceneEncoding,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn benchmarks(c: &mut Criterion) {
    fps(c);
    descriptors(c);
    losses(c);
    sampling(c);
}

fn fps(c: &mut Criterion) {
    let mut group = c.benchmark_group("fps");
    for n in [1024, 4096] {
        let cloud = generate_object(Category::DrawerCabinet, 0, n).unwrap();
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &cloud, |b, cloud| {
            b.iter(|| farthest_point_sample(black_box(cloud), n / 2, 0).unwrap())
        });
    }
    group.finish();
}

fn descriptors(c: &mut Criterion) {
    let mut group = c.benchmark_group("descriptors");
    group.sample_size(20);
    for k in [8, 16, 32] {
        let cloud = generate_object(Category::PotWithHandle, 1, 1024).unwrap();
        group.bench_with_input(BenchmarkId::new("k", k), &cloud, |b, cloud| {
            b.iter(|| extract_descriptors(black_box(cloud), k).unwrap())
        });
    }
    group.finish();
}

fn unit_batch(rows: usize, dim: usize, parts: usize, seed: u64) -> LabeledFeatureBatch {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / n));
    }
    let labels = (0..rows).map(|_| r.random_range(0..parts)).collect();
    LabeledFeatureBatch::new(Mat::from_vec(rows, dim, data), labels, "bench").unwrap()
}

fn losses(c: &mut Criterion) {
    let mut group = c.benchmark_group("losses");
    let names = ["body", "handle", "lid", "door"];
    let cb = build_codebook(&names, 32, 0).unwrap();
    let cfg = LossConfig::default();
    for rows in [32, 96, 256] {
        let batch = unit_batch(rows, 32, names.len(), rows as u64);
        group.bench_with_input(BenchmarkId::new("value_and_gradient", rows), &batch, |b, batch| {
            b.iter(|| loss_and_gradients(black_box(batch), &cb, &cfg).unwrap())
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let mut group = c.benchmark_group("sampling");
    let cfg = PolicyConfig::default();
    let params = init_policy(32, &cfg).unwrap();
    let obs = Observation {
        scene: SceneEncoding { feature: vec![1.0 / 32f64.sqrt(); 32], position: [0.0, 0.0, 0.1] },
        agent: [0.05, -0.02, 0.3, 0.0],
        prev_agent: [0.05, -0.02, 0.31, 0.0],
    };
    for mode in [SamplerMode::DdimDeterministic, SamplerMode::DdpmPosterior] {
        group.bench_function(format!("{mode:?}"), |b| {
            b.iter(|| sample_actions(&params, black_box(&obs), mode, 0).unwrap())
        });
    }
    group.finish();
}
