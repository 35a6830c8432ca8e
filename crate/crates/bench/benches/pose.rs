use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fusevo::pose::{canonicalize, relative};
use fusevo_bench::random_poses;

fn bench(c: &mut Criterion) {
    let poses = random_poses(1024, 7);
    c.bench_function("compose 1024", |b| {
        b.iter(|| poses.windows(2).map(|w| w[0].compose(&w[1])).fold(0.0, |acc, p| acc + p.t()[0]))
    });
    c.bench_function("relative 1024", |b| b.iter(|| poses.windows(2).map(|w| relative(black_box(&w[0]), &w[1]).q()[0]).sum::<f64>()));
    c.bench_function("canonicalize", |b| b.iter(|| canonicalize(black_box([-0.3, 0.2, 0.5, -0.1]))));
}

criterion_group!(benches, bench);
criterion_main!(benches);
