//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Run with `cargo test -p fusevo-core --test acceptance`;
//! criterion numbers given after `--` restrict the run to those criteria.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fusevo::checkpoint::SceneRegistry;
use fusevo::dataset::{synth_sequence, Route, SynthParams};
use fusevo::loss::{joint_loss, joint_loss_grad, make_pair_spec, relative_loss, relative_loss_grad, PairSpec};
use fusevo::metrics::{accumulate_trajectory, adjacent_relatives, format_ablation_table, kitti_drift, median_pose_errors, KITTI_LENGTHS};
use fusevo::model::{activation_shapes, param_shapes, Mode, ModelConfig};
use fusevo::pipeline::{ablation_sweep, evaluate_sequence, run_pipeline, split_tail, PipelineConfig};
use fusevo::pose::{canonicalize, relative, rotation_angle_deg, translation_distance, PoseMatrix};
use fusevo::train::{lr_schedule, StageKind};
use fusevo::{LossWeights, Pose, RawPose, WindowPrediction, WindowTarget};

const POSE_SAMPLES: usize = 1000;
const POSE_TOL: f64 = 1e-9;
const POSE_BUDGET: Duration = Duration::from_secs(5);

const LOSS_TOL: f64 = 1e-12;
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const FD_INSTANCES: usize = 100;
const LOSS_BUDGET: Duration = Duration::from_secs(60);

const SHAPE_BUDGET: Duration = Duration::from_secs(30);

const METRIC_MAX_FRAMES: usize = 200;
const SCALE_TOL: f64 = 1e-9;
const METRIC_BUDGET: Duration = Duration::from_secs(30);

const SCHEDULE_TOTAL: u64 = 100_000;
const SCHEDULE_PLATEAUS: [f64; 5] = [1e-3, 5e-4, 2.5e-4, 1.25e-4, 6.25e-5];

const OVERFIT_FRAMES: usize = 320;
const OVERFIT_TAIL: usize = 80;
const OVERFIT_LOSS_RATIO: f64 = 0.1;
const OVERFIT_BUDGET: Duration = Duration::from_secs(30 * 60);

const SWEEP_KS: [usize; 3] = [2, 3, 5];

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("pose algebra", pose_algebra),
        ("loss", loss_suite),
        ("architecture shapes", architecture_shapes),
        ("metric oracles", metric_oracles),
        ("lr schedule", schedule),
        ("desk-scale overfit", desk_scale_overfit),
        ("K sweep", k_sweep),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let out = f();
        let tag = if out.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {}. {name}: {} ({:.1} s)", i + 1, out.detail, t0.elapsed().as_secs_f64());
        failed += usize::from(!out.pass);
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------------------
// 1

fn mat_mul(a: &PoseMatrix, b: &PoseMatrix) -> PoseMatrix {
    let mut out = [[0.0; 4]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a.0[i][k] * b.0[k][j]).sum::<f64>();
            if j == 3 {
                *v += a.0[i][3];
            }
        }
    }
    PoseMatrix(out)
}

fn mat_diff(a: &PoseMatrix, b: &PoseMatrix) -> f64 {
    a.0.iter().flatten().zip(b.0.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn pose_diff(a: &Pose, b: &Pose) -> f64 {
    mat_diff(&a.to_matrix(), &b.to_matrix())
}

fn pose_algebra() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..POSE_SAMPLES {
        let a = Pose::random(&mut rng, 50.0);
        let b = Pose::random(&mut rng, 50.0);
        let c = Pose::random(&mut rng, 50.0);
        let errs = [
            pose_diff(&a.compose(&b).compose(&c), &a.compose(&b.compose(&c))),
            pose_diff(&a.compose(&Pose::IDENTITY), &a),
            pose_diff(&Pose::IDENTITY.compose(&a), &a),
            pose_diff(&a.compose(&a.inverse()), &Pose::IDENTITY),
            pose_diff(&a.inverse().compose(&a), &Pose::IDENTITY),
            mat_diff(&a.compose(&b).to_matrix(), &mat_mul(&a.to_matrix(), &b.to_matrix())),
            pose_diff(&relative(&b, &c).compose(&relative(&a, &b)), &relative(&a, &c)),
            pose_diff(&relative(&a, &b).compose(&a), &b),
        ];
        worst = errs.into_iter().fold(worst, f64::max);

        let raw: [f64; 4] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let Ok(once) = canonicalize(raw) else { continue };
        let twice = canonicalize(once).expect("unit quaternion");
        let negated = canonicalize(raw.map(|v| -v)).expect("nonzero");
        for (x, (y, z)) in once.iter().zip(twice.iter().zip(&negated)) {
            worst = worst.max((x - y).abs()).max((x - z).abs());
        }
    }
    let gt: Vec<Pose> = (0..POSE_SAMPLES).map(|_| Pose::random(&mut rng, 5.0)).collect();
    let rebuilt = accumulate_trajectory(gt[0], &adjacent_relatives(&gt));
    let chain = gt.iter().zip(&rebuilt.poses).map(|(a, b)| pose_diff(a, b)).fold(0.0, f64::max);
    worst = worst.max(chain);
    let elapsed = t0.elapsed();
    check(
        worst <= POSE_TOL && elapsed < POSE_BUDGET,
        format!("{POSE_SAMPLES} samples, max error {worst:.2e} (tol {POSE_TOL:.0e}), {:.2} s (budget {} s)", elapsed.as_secs_f64(), POSE_BUDGET.as_secs()),
    )
}

// ---------------------------------------------------------------------------
// 2

fn raw_near(rng: &mut ChaCha8Rng, p: &Pose, spread: f64) -> RawPose {
    let mut v = p.to_array();
    if rng.random_bool(0.5) {
        for c in &mut v[3..] {
            *c = -*c;
        }
    }
    let scale = rng.random_range(0.5..2.0);
    for (i, c) in v.iter_mut().enumerate() {
        if i >= 3 {
            *c *= scale;
        }
        if spread > 0.0 {
            *c += rng.random_range(-spread..spread);
        }
    }
    RawPose::from_array(v)
}

fn random_window(rng: &mut ChaCha8Rng, spec: &PairSpec, spread: f64) -> (WindowPrediction, WindowTarget) {
    let globals: Vec<Pose> = (0..spec.k()).map(|_| Pose::random(rng, 3.0)).collect();
    let tgt = WindowTarget::from_globals(globals, spec).expect("window target");
    let pred = WindowPrediction {
        pred_pairs: tgt.gt_pairs.iter().map(|p| raw_near(rng, p, spread)).collect(),
        pred_global: tgt.gt_global.iter().map(|p| raw_near(rng, p, spread)).collect(),
    };
    (pred, tgt)
}

/// `‖Δt‖² + β·min(‖q/|q| − g‖², ‖q/|q| + g‖²)` from the raw 7-vectors.
fn brute_pose_error(pred: &RawPose, gt: &Pose, beta: f64) -> f64 {
    let p = pred.to_array();
    let g = gt.to_array();
    let n = p[3..].iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut dt = 0.0;
    for i in 0..3 {
        dt += (p[i] - g[i]).powi(2);
    }
    let (mut minus, mut plus) = (0.0, 0.0);
    for i in 3..7 {
        minus += (p[i] / n - g[i]).powi(2);
        plus += (p[i] / n + g[i]).powi(2);
    }
    dt + beta * minus.min(plus)
}

fn brute_losses(batch: &[(WindowPrediction, WindowTarget)], w: &LossWeights) -> (f64, f64) {
    let mut ctc = 0.0;
    let mut global = 0.0;
    for (pred, tgt) in batch {
        for k in 0..pred.pred_pairs.len() {
            ctc += brute_pose_error(&pred.pred_pairs[k], &tgt.gt_pairs[k], w.beta_rot);
        }
        for j in 0..pred.pred_global.len() {
            global += brute_pose_error(&pred.pred_global[j], &tgt.gt_global[j], w.beta_rot);
        }
    }
    let n = batch.len() as f64;
    (ctc / n, ctc / n + w.lambda_global * global / n)
}

fn near_sign_switch(batch: &[(WindowPrediction, WindowTarget)]) -> bool {
    let close = |p: &RawPose, g: &Pose| {
        let q = p.to_array();
        let n = q[3..].iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = (0..4).map(|i| q[3 + i] / n * g.q()[i]).sum();
        dot.abs() < 1e-3
    };
    batch.iter().any(|(p, t)| {
        p.pred_pairs.iter().zip(&t.gt_pairs).chain(p.pred_global.iter().zip(&t.gt_global)).any(|(a, b)| close(a, b))
    })
}

type LossFn = fn(&[(WindowPrediction, WindowTarget)], &PairSpec, &LossWeights) -> fusevo::Result<f64>;

fn slot(pred: &mut WindowPrediction, global: bool, j: usize) -> &mut RawPose {
    if global {
        &mut pred.pred_global[j]
    } else {
        &mut pred.pred_pairs[j]
    }
}

/// Relative error between `analytic` and central differences of `f` over
/// every raw output of the batch.
fn fd_error(batch: &[(WindowPrediction, WindowTarget)], spec: &PairSpec, w: &LossWeights, f: LossFn, analytic: &[WindowPrediction]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut work = batch.to_vec();
    for b in 0..batch.len() {
        for global in [false, true] {
            let count = if global { batch[b].0.pred_global.len() } else { batch[b].0.pred_pairs.len() };
            for j in 0..count {
                let orig = *slot(&mut work[b].0, global, j);
                for c in 0..7 {
                    let mut v = orig.to_array();
                    v[c] += FD_STEP;
                    *slot(&mut work[b].0, global, j) = RawPose::from_array(v);
                    let up = f(&work, spec, w).expect("loss");
                    v[c] -= 2.0 * FD_STEP;
                    *slot(&mut work[b].0, global, j) = RawPose::from_array(v);
                    let down = f(&work, spec, w).expect("loss");
                    *slot(&mut work[b].0, global, j) = orig;
                    let fd = (up - down) / (2.0 * FD_STEP);
                    let mut g = analytic[b].clone();
                    let a = slot(&mut g, global, j).to_array()[c];
                    num += (a - fd).powi(2);
                    den += fd * fd;
                }
            }
        }
    }
    num.sqrt() / den.sqrt().max(1e-8)
}

fn loss_suite() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut notes = Vec::new();
    let mut pass = true;

    let expected = vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 2), (2, 4), (0, 4)];
    let pairs_ok = make_pair_spec(5).ok().map(|s| s.pairs().to_vec()) == Some(expected);
    pass &= pairs_ok;
    notes.push(format!("K=5 pairs {}", if pairs_ok { "match" } else { "differ" }));

    let mut worst_zero = 0.0f64;
    for k in 2..=8 {
        let spec = make_pair_spec(k).expect("pair spec");
        let (_, tgt) = random_window(&mut rng, &spec, 0.0);
        let flip = |p: &Pose, neg: bool| {
            let mut v = p.to_array();
            if neg {
                for c in &mut v[3..] {
                    *c = -*c;
                }
            }
            RawPose::from_array(v)
        };
        for neg in [false, true] {
            let pred = WindowPrediction {
                pred_pairs: tgt.gt_pairs.iter().map(|p| flip(p, neg)).collect(),
                pred_global: tgt.gt_global.iter().map(|p| flip(p, neg)).collect(),
            };
            let batch = [(pred, tgt.clone())];
            let w = LossWeights::new(rng.random_range(0.1..100.0), rng.random_range(0.1..10.0)).expect("weights");
            worst_zero = worst_zero.max(joint_loss(&batch, &spec, &w).expect("loss").abs());
        }
    }
    pass &= worst_zero <= LOSS_TOL;
    notes.push(format!("zero-at-truth max {worst_zero:.1e}"));

    let mut worst_brute = 0.0f64;
    let mut worst_fd = 0.0f64;
    let mut instances = 0;
    while instances < FD_INSTANCES {
        let k = rng.random_range(2..=6);
        let spec = make_pair_spec(k).expect("pair spec");
        let n = rng.random_range(1..=3);
        let batch: Vec<_> = (0..n).map(|_| random_window(&mut rng, &spec, 0.5)).collect();
        if near_sign_switch(&batch) {
            continue;
        }
        let w = LossWeights::new(rng.random_range(0.5..100.0), rng.random_range(0.1..4.0)).expect("weights");
        let (ctc, joint) = brute_losses(&batch, &w);
        let rel = relative_loss(&batch, &spec, &w).expect("relative loss");
        let jnt = joint_loss(&batch, &spec, &w).expect("joint loss");
        worst_brute = worst_brute.max((rel - ctc).abs() / ctc.abs().max(1.0)).max((jnt - joint).abs() / joint.abs().max(1.0));

        let (_, g_rel) = relative_loss_grad(&batch, &spec, &w).expect("relative grad");
        let (_, g_joint) = joint_loss_grad(&batch, &spec, &w).expect("joint grad");
        worst_fd = worst_fd.max(fd_error(&batch, &spec, &w, relative_loss, &g_rel));
        worst_fd = worst_fd.max(fd_error(&batch, &spec, &w, joint_loss, &g_joint));
        instances += 1;
    }
    pass &= worst_brute <= LOSS_TOL && worst_fd <= FD_REL_TOL;
    notes.push(format!("brute-force max rel {worst_brute:.1e} (tol {LOSS_TOL:.0e})"));
    notes.push(format!("finite differences on {instances} instances max rel {worst_fd:.1e} (tol {FD_REL_TOL:.0e})"));

    let elapsed = t0.elapsed();
    pass &= elapsed < LOSS_BUDGET;
    check(pass, notes.join(", "))
}

// ---------------------------------------------------------------------------
// 3

fn architecture_shapes() -> Outcome {
    let t0 = Instant::now();
    let cfg = ModelConfig::paper(5);
    let params = param_shapes(&cfg);
    let shape = |name: &str| params.iter().find(|(n, _)| n == name).map(|(_, s)| s.clone());
    let act = activation_shapes(&cfg);
    let act_shape = |name: &str| act.iter().find(|(n, _)| *n == name).map(|(_, s)| s.clone());
    let mut failures = Vec::new();
    let mut expect = |what: &str, got: Option<Vec<usize>>, want: Vec<usize>| {
        if got.as_ref() != Some(&want) {
            failures.push(format!("{what} {got:?} != {want:?}"));
        }
    };

    expect("fc1 output", act_shape("rel.fc1"), vec![1024]);
    expect("fc2 output", act_shape("glob.fc2"), vec![1024]);
    expect("fc3 output", act_shape("fuse.fc3"), vec![1024]);
    expect("fc4 output", act_shape("fuse.fc4"), vec![3]);
    expect("fc5 output", act_shape("fuse.fc5"), vec![4]);
    expect("fc3 weight", shape("fuse.fc3.weight"), vec![2048, 1024]);
    for prefix in ["rel", "glob", "fuse"] {
        expect(&format!("{prefix}.fc4 bias"), shape(&format!("{prefix}.fc4.bias")), vec![3]);
        expect(&format!("{prefix}.fc5 bias"), shape(&format!("{prefix}.fc5.bias")), vec![4]);
    }
    expect("fc1 bias", shape("rel.fc1.bias"), vec![1024]);
    expect("fc2 bias", shape("glob.fc2.bias"), vec![1024]);
    let rel_layers = params.iter().filter(|(n, _)| n.starts_with("rel.lstm.") && n.ends_with(".w_hh")).count();
    expect("relative LSTM layers", Some(vec![rel_layers]), vec![2]);
    for l in 0..2 {
        expect(&format!("rel.lstm.{l} w_hh"), shape(&format!("rel.lstm.{l}.w_hh")), vec![1000, 4000]);
    }
    expect("relative LSTM output", act_shape("rel.lstm"), vec![1000]);
    for prefix in ["rel", "glob"] {
        let got = act_shape(&format!("{prefix}.stage5")).map(|s| s[..1].to_vec());
        expect(&format!("{prefix}.stage5 channels"), got, vec![1024]);
    }

    let elapsed = t0.elapsed();
    let detail = if failures.is_empty() {
        format!("{} parameter tensors checked against the `paper` preset", params.len())
    } else {
        failures.join("; ")
    };
    check(failures.is_empty() && elapsed < SHAPE_BUDGET, detail)
}

// ---------------------------------------------------------------------------
// 4

fn naive_median(v: &[f64]) -> f64 {
    let n = v.len();
    let kth = |k: usize| -> f64 {
        for &x in v {
            let below = v.iter().filter(|&&y| y < x).count();
            let at_most = v.iter().filter(|&&y| y <= x).count();
            if below <= k && k < at_most {
                return x;
            }
        }
        unreachable!("order statistic exists")
    };
    if n % 2 == 1 {
        kth(n / 2)
    } else {
        (kth(n / 2 - 1) + kth(n / 2)) / 2.0
    }
}

fn naive_drift(pred: &[Pose], gt: &[Pose]) -> (f64, f64) {
    let n = gt.len();
    let mut dist = vec![0.0; n];
    for i in 1..n {
        dist[i] = dist[i - 1] + translation_distance(&gt[i - 1], &gt[i]);
    }
    let (mut t_sum, mut r_sum, mut lengths) = (0.0, 0.0, 0usize);
    for &len in &KITTI_LENGTHS {
        let (mut t_sq, mut r_sq, mut count) = (0.0, 0.0, 0usize);
        for first in 0..n {
            let mut last = None;
            for j in first + 1..n {
                if dist[j] - dist[first] >= len {
                    last = Some(j);
                    break;
                }
            }
            let Some(last) = last else { continue };
            let delta_gt = gt[first].inverse().compose(&gt[last]);
            let delta_pred = pred[first].inverse().compose(&pred[last]);
            let err = delta_pred.inverse().compose(&delta_gt);
            let t = err.t();
            let t_err = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
            let r_err = rotation_angle_deg(&Pose::IDENTITY, &err);
            t_sq += (t_err / len).powi(2);
            r_sq += (r_err / len).powi(2);
            count += 1;
        }
        if count > 0 {
            t_sum += 100.0 * (t_sq / count as f64).sqrt();
            r_sum += 100.0 * (r_sq / count as f64).sqrt();
            lengths += 1;
        }
    }
    if lengths == 0 {
        (0.0, 0.0)
    } else {
        (t_sum / lengths as f64, r_sum / lengths as f64)
    }
}

fn noisy_path(rng: &mut ChaCha8Rng, n: usize, step: f64) -> (Vec<Pose>, Vec<Pose>) {
    let mut gt = vec![Pose::IDENTITY];
    let mut pred = vec![Pose::IDENTITY];
    for _ in 1..n {
        let yaw = rng.random_range(-0.05..0.05);
        let motion = Pose::from_axis_angle([0.0, 1.0, 0.0], yaw, [rng.random_range(-0.1..0.1), 0.0, step]);
        let noise = Pose::from_axis_angle([rng.random_range(-1.0..1.0), 1.0, 0.3], rng.random_range(-0.01..0.01), std::array::from_fn(|_| rng.random_range(-0.05..0.05)));
        let g = gt.last().expect("nonempty").compose(&motion);
        let p = pred.last().expect("nonempty").compose(&motion.compose(&noise));
        gt.push(g);
        pred.push(p);
    }
    (pred, gt)
}

fn metric_oracles() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut trials = 0;
    for &(n, step) in &[(2usize, 1.0), (11, 10.0), (60, 2.5), (120, 4.0), (METRIC_MAX_FRAMES, 4.5), (METRIC_MAX_FRAMES - 1, 1.0)] {
        for _ in 0..3 {
            let (pred, gt) = noisy_path(&mut rng, n, step);
            let drift = kitti_drift(&pred, &gt).expect("drift");
            let median = median_pose_errors(&pred, &gt).expect("median");
            let t: Vec<f64> = pred.iter().zip(&gt).map(|(p, g)| translation_distance(p, g)).collect();
            let r: Vec<f64> = pred.iter().zip(&gt).map(|(p, g)| rotation_angle_deg(p, g)).collect();
            let (t_rel, r_rel) = naive_drift(&pred, &gt);
            let agree = drift.t_rel == t_rel && drift.r_rel == r_rel && median.t_med == naive_median(&t) && median.r_med == naive_median(&r);
            mismatches += usize::from(!agree);
            trials += 1;
        }
    }

    let (_, gt) = noisy_path(&mut rng, METRIC_MAX_FRAMES, 5.0);
    let same_drift = kitti_drift(&gt, &gt).expect("drift");
    let same_median = median_pose_errors(&gt, &gt).expect("median");
    let zeros = [same_drift.t_rel, same_drift.r_rel, same_median.t_med, same_median.r_med].iter().all(|&v| v == 0.0);

    let gt: Vec<Pose> = (0..=900).map(|i| Pose::from_translation([0.0, 0.0, i as f64])).collect();
    let pred: Vec<Pose> = (0..=900).map(|i| Pose::from_translation([0.0, 0.0, 1.01 * i as f64])).collect();
    let scaled = kitti_drift(&pred, &gt).expect("drift");
    let scale_err = scaled.per_length.iter().map(|l| (l.t_rel - 1.0).abs()).fold((scaled.t_rel - 1.0).abs(), f64::max);
    let scale_ok = scaled.per_length.len() == KITTI_LENGTHS.len() && scale_err <= SCALE_TOL;

    let elapsed = t0.elapsed();
    check(
        mismatches == 0 && zeros && scale_ok && elapsed < METRIC_BUDGET,
        format!(
            "naive agreement {}/{trials} exact, identical -> zeros {zeros}, scale fixture max |t_rel - 1%| {scale_err:.1e} over {} lengths",
            trials - mismatches,
            scaled.per_length.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 5

fn schedule() -> Outcome {
    let mut plateaus: Vec<f64> = Vec::new();
    for it in 0..SCHEDULE_TOTAL {
        let lr = lr_schedule(it, SCHEDULE_TOTAL, 1e-3);
        if plateaus.last() != Some(&lr) {
            plateaus.push(lr);
        }
    }
    check(plateaus == SCHEDULE_PLATEAUS, format!("plateaus {plateaus:?}"))
}

// ---------------------------------------------------------------------------
// 6

fn overfit_config() -> PipelineConfig {
    PipelineConfig {
        seed: 0,
        k: 5,
        beta_rot: 100.0,
        epochs_relative: 60,
        epochs_global: 100,
        epochs_end_to_end: 150,
        ..PipelineConfig::default()
    }
}

fn desk_scale_overfit() -> Outcome {
    let t0 = Instant::now();
    let cfg = overfit_config();
    let params = SynthParams { n_frames: OVERFIT_FRAMES, route: Route::Circuit, seed: cfg.seed, ..SynthParams::default() };
    let result = (|| -> fusevo::Result<(bool, String)> {
        let seq = synth_sequence(&params)?;
        let (train, tail) = split_tail(&[seq], OVERFIT_TAIL)?;
        let dir = tempfile::tempdir()?;
        let registry = SceneRegistry::open(dir.path())?;
        let run = run_pipeline(&cfg, &train, &registry, StageKind::EndToEnd, None, &mut |_| {})?;
        let e2e = run.end_to_end.as_ref().expect("three stages ran");
        let losses = &e2e.state.epoch_losses;
        let (first, last) = (losses[0].total, losses[losses.len() - 1].total);
        let ratio = last / first;
        let fused = evaluate_sequence(&e2e.model, &e2e.store, &e2e.norm, &tail[0], Mode::Fused)?;
        let rel = evaluate_sequence(&run.relative.model, &run.relative.store, &run.relative.norm, &tail[0], Mode::RelativeOnly)?;
        let pass = ratio <= OVERFIT_LOSS_RATIO && fused.drift.t_rel <= rel.drift.t_rel;
        Ok((pass, format!(
            "joint loss {first:.4} -> {last:.4} (ratio {ratio:.4}, limit {OVERFIT_LOSS_RATIO}); tail t_rel fused {:.2}% vs relative_only {:.2}%; \
             tail r_rel fused {:.2} vs relative_only {:.2} deg/100m; tail medians fused {:.2} m / {:.2} deg, relative_only {:.2} m / {:.2} deg",
            fused.drift.t_rel,
            rel.drift.t_rel,
            fused.drift.r_rel,
            rel.drift.r_rel,
            fused.median.t_med,
            fused.median.r_med,
            rel.median.t_med,
            rel.median.r_med,
        )))
    })();
    let elapsed = t0.elapsed();
    match result {
        Ok((pass, detail)) => check(pass && elapsed < OVERFIT_BUDGET, detail),
        Err(e) => check(false, format!("error: {e}")),
    }
}

// ---------------------------------------------------------------------------
// 7

fn k_sweep() -> Outcome {
    let cfg = PipelineConfig { epochs_relative: 4, epochs_global: 4, epochs_end_to_end: 4, ..PipelineConfig::default() };
    let params = SynthParams { n_frames: 240, route: Route::Circuit, ..SynthParams::default() };
    let result = (|| -> fusevo::Result<String> {
        let seq = synth_sequence(&params)?;
        let (train, tail) = split_tail(&[seq], 80)?;
        let dir = tempfile::tempdir()?;
        let variants: Vec<(Mode, usize)> = SWEEP_KS.iter().map(|&k| (Mode::Fused, k)).collect();
        let rows = ablation_sweep(&variants, &train, &tail, &cfg, dir.path(), &mut |_| {})?;
        let ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
        if ks != SWEEP_KS {
            return Err(fusevo::Error::Config(format!("rows for K {ks:?}")));
        }
        Ok(format_ablation_table(&rows))
    })();
    match result {
        Ok(table) => {
            println!("{table}");
            check(true, format!("{} variants trained and evaluated, table above", SWEEP_KS.len()))
        }
        Err(e) => check(false, format!("error: {e}")),
    }
}
