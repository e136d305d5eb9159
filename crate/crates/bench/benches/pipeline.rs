use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};

use crowdpoint::blocks::RepConv;
use crowdpoint::data::synth_scenes;
use crowdpoint::decoder::PredPoint;
use crowdpoint::matching::{hungarian, CostMatrix};
use crowdpoint::metrics::localization_metrics;
use crowdpoint::model::{dense_forward, NetConfig, PointNet};
use crowdpoint::nn::ParamStore;
use crowdpoint::ChaCha8Rng;

fn bench_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f32>::new();
    let model = PointNet::new(&mut store, &mut rng, &NetConfig::tiny()).unwrap();
    let scene = &synth_scenes(1, (10, 10), 128, 3).unwrap()[0];
    c.bench_function("forward_tiny_128", |b| {
        b.iter(|| dense_forward(&model, &mut store, &scene.image).unwrap())
    });
}

fn bench_hungarian(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian");
    for &(p, n) in &[(64usize, 16usize), (1024, 20), (4096, 20)] {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let costs = CostMatrix::new(Array2::from_shape_fn((p, n), |_| {
            rng.random_range(-1.0..10.0)
        }))
        .unwrap();
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{p}x{n}")),
            &costs,
            |b, costs| b.iter(|| hungarian(costs).unwrap()),
        );
    }
    group.finish();
}

fn bench_repconv_fold(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f32>::new();
    let rep = RepConv::new(&mut store, &mut rng, "r", 64, 32, false);
    c.bench_function("repconv_fold_64_to_32", |b| {
        b.iter(|| rep.folded_kernel(&store).unwrap())
    });
}

fn bench_localization(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pred: Vec<PredPoint> = (0..200)
        .map(|_| PredPoint {
            x: rng.random_range(0.0..512.0),
            y: rng.random_range(0.0..512.0),
            score: 1.0,
        })
        .collect();
    let gt: Vec<(f64, f64)> = (0..200)
        .map(|_| (rng.random_range(0.0..512.0), rng.random_range(0.0..512.0)))
        .collect();
    c.bench_function("localization_200x200", |b| {
        b.iter(|| localization_metrics(&pred, &gt, 4.0).unwrap())
    });
}

criterion_group!(
    benches,
    bench_forward,
    bench_hungarian,
    bench_repconv_fold,
    bench_localization
);
criterion_main!(benches);
