//! Deterministic inputs shared by the benchmarks.

use fusevo::dataset::{synth_sequence, SynthParams};
use fusevo::loss::{make_pair_spec, PairSpec, RawPose, WindowPrediction, WindowTarget};
use fusevo::metrics::accumulate_trajectory;
use fusevo::pose::Pose;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_poses(n: usize, seed: u64) -> Vec<Pose> {
    let mut r = rng(seed);
    (0..n).map(|_| Pose::random(&mut r, 10.0)).collect()
}

/// A drive of `n` frames with small random steps, plus a perturbed copy.
pub fn trajectory_pair(n: usize, seed: u64) -> (Vec<Pose>, Vec<Pose>) {
    let gt = synth_sequence(&SynthParams { n_frames: n, image_size: (1, 1), seed, ..SynthParams::default() })
        .expect("valid parameters")
        .gt;
    let mut r = rng(seed ^ 1);
    let steps: Vec<Pose> = gt
        .windows(2)
        .map(|w| {
            let noise = Pose::from_axis_angle([0.0, 0.0, 1.0], r.random_range(-1e-3..1e-3), [r.random_range(-0.02..0.02), 0.0, 0.0]);
            noise.compose(&fusevo::pose::relative(&w[0], &w[1]))
        })
        .collect();
    let pred = accumulate_trajectory(gt[0], &steps).poses;
    (pred, gt)
}

/// `b` windows of length `k` with noisy predictions of their targets.
pub fn loss_batch(k: usize, b: usize, seed: u64) -> (PairSpec, Vec<(WindowPrediction, WindowTarget)>) {
    let spec = make_pair_spec(k).expect("k >= 2");
    let mut r = rng(seed);
    let batch = (0..b)
        .map(|_| {
            let gt: Vec<Pose> = (0..k).map(|_| Pose::random(&mut r, 5.0)).collect();
            let target = WindowTarget::from_globals(gt, &spec).expect("k poses");
            let mut noisy = |p: &Pose| {
                let mut raw = RawPose::from(*p);
                raw.t.iter_mut().chain(raw.q.iter_mut()).for_each(|v| *v += r.random_range(-0.05..0.05));
                raw
            };
            let pred_global = target.gt_global.iter().map(&mut noisy).collect();
            let pred_pairs = target.gt_pairs.iter().map(&mut noisy).collect();
            (WindowPrediction { pred_global, pred_pairs }, target)
        })
        .collect();
    (spec, batch)
}
