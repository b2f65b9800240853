use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pearl_core::adversary::{kmeans_best, wcss_curve};
use pearl_core::nn::random_input;
use pearl_core::privacy::mutual_information;
use pearl_core::qnet::{EEQNetwork, DEFAULT_HEAD_WIDTH, DEFAULT_TRUNK_WIDTH};
use pearl_core::seed::SeedTree;
use pearl_core::thermal::pmv;
use rand::Rng;

fn forward(c: &mut Criterion) {
    let mut rng = SeedTree::new(1).stream("bench/net");
    let mut net = EEQNetwork::new(7, 21, DEFAULT_TRUNK_WIDTH, DEFAULT_HEAD_WIDTH).unwrap();
    for _ in 0..10 {
        net.add_stage(&mut rng);
    }
    let s = random_input(7, &mut rng);
    let mut group = c.benchmark_group("q_values");
    for branch in [0, 4, 9] {
        group.bench_with_input(BenchmarkId::from_parameter(branch + 1), &branch, |b, &br| {
            b.iter(|| net.q_values(black_box(&s), br).unwrap())
        });
    }
    group.finish();
    c.bench_function("forward_all/10", |b| b.iter(|| net.forward_all(black_box(&s)).unwrap()));
}

fn mi(c: &mut Criterion) {
    let mut rng = SeedTree::new(2).stream("bench/mi");
    let mut group = c.benchmark_group("mutual_information");
    for n in [168, 1_000, 10_000] {
        let window: Vec<(usize, usize)> = (0..n).map(|_| (rng.random_range(0..126), rng.random_range(0..21))).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &window, |b, w| {
            b.iter(|| mutual_information(black_box(w)))
        });
    }
    group.finish();
}

fn clustering(c: &mut Criterion) {
    let mut rng = SeedTree::new(3).stream("bench/points");
    let points: Vec<Vec<f64>> = (0..1_200)
        .map(|i| vec![(i % 24) as f64, rng.random_range(0..21) as f64])
        .collect();
    c.bench_function("kmeans_best/k6", |b| {
        b.iter(|| kmeans_best(black_box(&points), 6, 10, &mut SeedTree::new(4).stream("km")).unwrap())
    });
    c.bench_function("wcss_curve/k12", |b| {
        b.iter(|| wcss_curve(black_box(&points), 12, 3, &mut SeedTree::new(5).stream("km")).unwrap())
    });
}

fn comfort(c: &mut Criterion) {
    c.bench_function("pmv", |b| b.iter(|| pmv(black_box(22.0), 22.0, 1.2, 0.5, 50.0, 0.1).unwrap()));
}

criterion_group!(benches, forward, mi, clustering, comfort);
criterion_main!(benches);
