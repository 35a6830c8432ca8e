use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fusevo::metrics::{kitti_drift, median_pose_errors};
use fusevo_bench::trajectory_pair;

fn bench(c: &mut Criterion) {
    let (pred, gt) = trajectory_pair(1200, 5);
    c.bench_function("kitti drift, 1200 frames", |b| b.iter(|| kitti_drift(black_box(&pred), &gt).unwrap()));
    c.bench_function("median errors, 1200 frames", |b| b.iter(|| median_pose_errors(black_box(&pred), &gt).unwrap()));
}

criterion_group!(benches, bench);
criterion_main!(benches);
