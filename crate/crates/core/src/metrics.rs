//! Trajectory reconstruction and the two evaluation protocols: per-frame
//! median errors and segment drift over 100–800 m.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Mode;
use crate::pose::{relative, rotation_angle_deg, translation_distance, Pose};

pub const KITTI_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryEstimate {
    pub poses: Vec<Pose>,
    pub frame_ids: Vec<usize>,
    pub mode: Option<Mode>,
}

impl TrajectoryEstimate {
    pub fn new(poses: Vec<Pose>, mode: Option<Mode>) -> TrajectoryEstimate {
        let frame_ids = (0..poses.len()).collect();
        TrajectoryEstimate { poses, frame_ids, mode }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Chains transforms onto `start`: `pose[i+1] = transform[i] ∘ pose[i]`.
pub fn accumulate_trajectory(start: Pose, transforms: &[Pose]) -> TrajectoryEstimate {
    let mut poses = Vec::with_capacity(transforms.len() + 1);
    poses.push(start);
    for t in transforms {
        let next = t.compose(poses.last().expect("nonempty"));
        poses.push(next);
    }
    TrajectoryEstimate::new(poses, None)
}

/// Transforms between consecutive poses; inverse of [`accumulate_trajectory`].
pub fn adjacent_relatives(poses: &[Pose]) -> Vec<Pose> {
    poses.windows(2).map(|w| relative(&w[0], &w[1])).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MedianReport {
    /// Metres.
    pub t_med: f64,
    /// Degrees.
    pub r_med: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn check_lengths(pred: &[Pose], gt: &[Pose]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch { left: pred.len(), right: gt.len() });
    }
    if pred.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// Median translation (m) and rotation (°) errors over frames.
pub fn median_pose_errors(pred: &[Pose], gt: &[Pose]) -> Result<MedianReport> {
    check_lengths(pred, gt)?;
    let t = pred.iter().zip(gt).map(|(p, g)| translation_distance(p, g)).collect();
    let r = pred.iter().zip(gt).map(|(p, g)| rotation_angle_deg(p, g)).collect();
    Ok(MedianReport { t_med: median(t), r_med: median(r) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthDrift {
    pub length: f64,
    /// Percent.
    pub t_rel: f64,
    /// Degrees per 100 m.
    pub r_rel: f64,
    pub segments: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub t_rel: f64,
    pub r_rel: f64,
    pub per_length: Vec<LengthDrift>,
    /// True when the trajectory is shorter than every segment length.
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftOptions {
    pub lengths: Vec<f64>,
    /// Spacing of segment start frames.
    pub step: usize,
}

impl Default for DriftOptions {
    fn default() -> Self {
        DriftOptions { lengths: KITTI_LENGTHS.to_vec(), step: 1 }
    }
}

/// Cumulative ground-truth path length at every frame.
pub fn path_distances(gt: &[Pose]) -> Vec<f64> {
    let mut d = Vec::with_capacity(gt.len());
    let mut acc = 0.0;
    for (i, p) in gt.iter().enumerate() {
        if i > 0 {
            acc += translation_distance(&gt[i - 1], p);
        }
        d.push(acc);
    }
    d
}

/// Translation (m) and rotation (°) of the error between the predicted and
/// true motion from `first` to `last`, each expressed in the first frame.
pub fn segment_error(pred: &[Pose], gt: &[Pose], first: usize, last: usize) -> (f64, f64) {
    let delta_gt = gt[first].inverse().compose(&gt[last]);
    let delta_pred = pred[first].inverse().compose(&pred[last]);
    let err = delta_pred.inverse().compose(&delta_gt);
    let t = err.t();
    ((t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt(), rotation_angle_deg(&Pose::IDENTITY, &err))
}

/// Segment drift with the standard lengths and every frame as a start.
pub fn kitti_drift(pred: &[Pose], gt: &[Pose]) -> Result<DriftReport> {
    kitti_drift_with(pred, gt, &DriftOptions::default())
}

/// For each length, the RMSE over segments of length-normalized errors; the
/// report averages those RMSEs over the lengths that have segments.
pub fn kitti_drift_with(pred: &[Pose], gt: &[Pose], opts: &DriftOptions) -> Result<DriftReport> {
    check_lengths(pred, gt)?;
    if opts.step == 0 || opts.lengths.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::Config("drift lengths must be positive and step at least 1".into()));
    }
    let dist = path_distances(gt);
    let mut per_length = Vec::new();
    for &len in &opts.lengths {
        let (mut t_sq, mut r_sq, mut count) = (0.0, 0.0, 0usize);
        for first in (0..gt.len()).step_by(opts.step) {
            let Some(last) = (first + 1..gt.len()).find(|&j| dist[j] - dist[first] >= len) else { continue };
            let (t, r) = segment_error(pred, gt, first, last);
            t_sq += (t / len).powi(2);
            r_sq += (r / len).powi(2);
            count += 1;
        }
        if count > 0 {
            per_length.push(LengthDrift {
                length: len,
                t_rel: 100.0 * (t_sq / count as f64).sqrt(),
                r_rel: 100.0 * (r_sq / count as f64).sqrt(),
                segments: count,
            });
        }
    }
    if per_length.is_empty() {
        return Ok(DriftReport { t_rel: 0.0, r_rel: 0.0, per_length, empty: true });
    }
    let n = per_length.len() as f64;
    let t_rel = per_length.iter().map(|l| l.t_rel).sum::<f64>() / n;
    let r_rel = per_length.iter().map(|l| l.r_rel).sum::<f64>() / n;
    Ok(DriftReport { t_rel, r_rel, per_length, empty: false })
}

impl DriftReport {
    /// `key=value` lines: `t_rel`, `r_rel`, `empty` and `t_rel_<L>`, `r_rel_<L>`, `segments_<L>` per length.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        writeln!(s, "t_rel={}", self.t_rel).unwrap();
        writeln!(s, "r_rel={}", self.r_rel).unwrap();
        writeln!(s, "empty={}", self.empty).unwrap();
        for l in &self.per_length {
            writeln!(s, "t_rel_{}={}", l.length, l.t_rel).unwrap();
            writeln!(s, "r_rel_{}={}", l.length, l.r_rel).unwrap();
            writeln!(s, "segments_{}={}", l.length, l.segments).unwrap();
        }
        s
    }
}

impl MedianReport {
    pub fn to_key_values(&self) -> String {
        format!("t_med={}\nr_med={}\n", self.t_med, self.r_med)
    }
}

/// Parses `key=value` lines, ignoring blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Drift table: one row per sequence plus the average row.
pub fn format_drift_table(rows: &[(String, DriftReport)]) -> String {
    let mut s = String::from("sequence\tt_rel(%)\tr_rel(deg/100m)\n");
    for (name, r) in rows {
        writeln!(s, "{name}\t{:.2}\t{:.2}", r.t_rel, r.r_rel).unwrap();
    }
    let valid: Vec<&DriftReport> = rows.iter().map(|(_, r)| r).filter(|r| !r.empty).collect();
    if !valid.is_empty() {
        let n = valid.len() as f64;
        let t = valid.iter().map(|r| r.t_rel).sum::<f64>() / n;
        let r = valid.iter().map(|r| r.r_rel).sum::<f64>() / n;
        writeln!(s, "Average\t{t:.2}\t{r:.2}").unwrap();
    }
    s
}

/// Median-error table: one row per scene plus the average row.
pub fn format_median_table(rows: &[(String, MedianReport)]) -> String {
    let mut s = String::from("scene\tt_med(m)\tr_med(deg)\n");
    for (name, r) in rows {
        writeln!(s, "{name}\t{:.3}\t{:.2}", r.t_med, r.r_med).unwrap();
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let t = rows.iter().map(|(_, r)| r.t_med).sum::<f64>() / n;
        let r = rows.iter().map(|(_, r)| r.r_med).sum::<f64>() / n;
        writeln!(s, "Average\t{t:.3}\t{r:.2}").unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub k: usize,
    pub drift: DriftReport,
    pub median: MedianReport,
}

/// Table of ablation results in input order.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("mode\tK\tt_rel(%)\tr_rel(deg/100m)\tt_med(m)\tr_med(deg)\n");
    for r in rows {
        writeln!(
            s,
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            r.mode, r.k, r.drift.t_rel, r.drift.r_rel, r.median.t_med, r.median.r_med
        )
        .unwrap();
    }
    s
}

/// Sidecar path for a plot file: `<file>.metrics`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".metrics");
    PathBuf::from(s)
}

/// Writes `frame pred_x pred_y pred_z gt_x gt_y gt_z` rows (tab separated,
/// one header line) and a `key=value` sidecar with drift and median errors.
///
/// With `align`, the predicted trajectory is rigidly moved so its first pose
/// coincides with the first ground-truth pose (display only; the sidecar
/// metrics are alignment-free anyway).
pub fn emit_plot_data(pred: &TrajectoryEstimate, gt: &[Pose], path: &Path, align: bool) -> Result<(DriftReport, MedianReport)> {
    check_lengths(&pred.poses, gt)?;
    let shift = if align { gt[0].compose(&pred.poses[0].inverse()) } else { Pose::IDENTITY };
    let mut s = String::from("frame\tpred_x\tpred_y\tpred_z\tgt_x\tgt_y\tgt_z\n");
    for ((id, p), g) in pred.frame_ids.iter().zip(&pred.poses).zip(gt) {
        let p = shift.compose(p).t();
        let g = g.t();
        writeln!(s, "{id}\t{}\t{}\t{}\t{}\t{}\t{}", p[0], p[1], p[2], g[0], g[1], g[2]).unwrap();
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, s)?;
    let drift = kitti_drift(&pred.poses, gt)?;
    let median = median_pose_errors(&pred.poses, gt)?;
    let mut side = String::new();
    if let Some(m) = pred.mode {
        writeln!(side, "mode={m}").unwrap();
    }
    side.push_str(&drift.to_key_values());
    side.push_str(&median.to_key_values());
    fs::write(sidecar_path(path), side)?;
    Ok((drift, median))
}

/// One parsed plot row: frame id, predicted and true positions.
pub type PlotRow = (usize, [f64; 3], [f64; 3]);

pub fn parse_plot_data(path: &Path) -> Result<Vec<PlotRow>> {
    let text = fs::read_to_string(path)?;
    let bad = |i: usize| Error::Config(format!("{}: malformed plot row {}", path.display(), i + 1));
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let tok: Vec<&str> = l.split('\t').collect();
            if tok.len() != 7 {
                return Err(bad(i));
            }
            let id = tok[0].parse().map_err(|_| bad(i))?;
            let v = tok[1..].iter().map(|t| t.parse::<f64>().map_err(|_| bad(i))).collect::<Result<Vec<_>>>()?;
            Ok((id, [v[0], v[1], v[2]], [v[3], v[4], v[5]]))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_walk(rng: &mut ChaCha8Rng, n: usize, step: f64) -> Vec<Pose> {
        let steps: Vec<Pose> = (0..n - 1)
            .map(|_| {
                let yaw = rng.random_range(-0.05..0.05);
                Pose::from_axis_angle([0.0, 0.0, 1.0], yaw, [step * rng.random_range(0.8..1.2), rng.random_range(-0.1..0.1), 0.0])
            })
            .collect();
        let mut poses = vec![Pose::IDENTITY];
        for s in &steps {
            // Body-frame steps: P_{i+1} = P_i ∘ S_i.
            let next = poses.last().unwrap().compose(s);
            poses.push(next);
        }
        poses
    }

    fn perturb(rng: &mut ChaCha8Rng, poses: &[Pose], t: f64, r: f64) -> Vec<Pose> {
        poses
            .iter()
            .map(|p| {
                let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let d = Pose::from_axis_angle(axis, rng.random_range(-r..r), [rng.random_range(-t..t), rng.random_range(-t..t), 0.0]);
                p.compose(&d)
            })
            .collect()
    }

    /// Straightforward drift computation: recomputes path lengths from scratch
    /// for every candidate end frame.
    fn naive_drift(pred: &[Pose], gt: &[Pose]) -> (f64, f64, Vec<(f64, f64, f64, usize)>) {
        let mut rows = Vec::new();
        for len in KITTI_LENGTHS {
            let mut t_sq = 0.0;
            let mut r_sq = 0.0;
            let mut count = 0;
            for first in 0..gt.len() {
                let mut last = None;
                for j in first + 1..gt.len() {
                    let mut d_first = 0.0;
                    for m in 1..=first {
                        d_first += translation_distance(&gt[m - 1], &gt[m]);
                    }
                    let mut d_j = 0.0;
                    for m in 1..=j {
                        d_j += translation_distance(&gt[m - 1], &gt[m]);
                    }
                    if d_j - d_first >= len {
                        last = Some(j);
                        break;
                    }
                }
                let Some(last) = last else { continue };
                let dg = gt[first].inverse().compose(&gt[last]);
                let dp = pred[first].inverse().compose(&pred[last]);
                let e = dp.inverse().compose(&dg);
                let et = e.t();
                let t = (et[0] * et[0] + et[1] * et[1] + et[2] * et[2]).sqrt();
                let r = rotation_angle_deg(&Pose::IDENTITY, &e);
                t_sq += (t / len) * (t / len);
                r_sq += (r / len) * (r / len);
                count += 1;
            }
            if count > 0 {
                rows.push((len, 100.0 * (t_sq / count as f64).sqrt(), 100.0 * (r_sq / count as f64).sqrt(), count));
            }
        }
        let n = rows.len() as f64;
        let t = rows.iter().map(|r| r.1).sum::<f64>() / n;
        let r = rows.iter().map(|r| r.2).sum::<f64>() / n;
        (t, r, rows)
    }

    fn naive_median(v: &[f64]) -> f64 {
        // Selection by counting ranks, no sorting.
        let n = v.len();
        let kth = |k: usize| {
            for &x in v {
                let less = v.iter().filter(|&&y| y < x).count();
                let equal = v.iter().filter(|&&y| y == x).count();
                if less <= k && k < less + equal {
                    return x;
                }
            }
            unreachable!()
        };
        if n % 2 == 1 {
            kth(n / 2)
        } else {
            (kth(n / 2 - 1) + kth(n / 2)) / 2.0
        }
    }

    #[test]
    fn accumulation_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt: Vec<Pose> = (0..50).map(|_| Pose::random(&mut rng, 10.0)).collect();
        let traj = accumulate_trajectory(gt[0], &adjacent_relatives(&gt));
        assert_eq!(traj.len(), 50);
        for (a, b) in traj.poses.iter().zip(&gt) {
            assert!(a.max_abs_diff(b) < 1e-8);
        }
        let still = accumulate_trajectory(gt[3], &[Pose::IDENTITY; 4]);
        assert!(still.poses.iter().all(|p| p.max_abs_diff(&gt[3]) < 1e-15));
    }

    #[test]
    fn accumulation_matches_matrix_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let start = Pose::random(&mut rng, 3.0);
        let steps: Vec<Pose> = (0..20).map(|_| Pose::random(&mut rng, 1.0)).collect();
        let traj = accumulate_trajectory(start, &steps);
        let to4 = |p: &Pose| {
            let m = p.to_matrix().0;
            nalgebra::Matrix4::from_fn(|r, c| if r < 3 { m[r][c] } else if c == 3 { 1.0 } else { 0.0 })
        };
        let mut acc = to4(&start);
        for (i, s) in steps.iter().enumerate() {
            acc = to4(s) * acc;
            let got = to4(&traj.poses[i + 1]);
            assert!((got - acc).abs().max() < 1e-9);
        }
    }

    #[test]
    fn median_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_walk(&mut rng, 30, 1.0);
        assert_eq!(median_pose_errors(&gt, &gt).unwrap(), MedianReport { t_med: 0.0, r_med: 0.0 });
        let off: Vec<Pose> = gt
            .iter()
            .map(|g| g.compose(&Pose::from_axis_angle([0.0, 1.0, 0.0], 2.62f64.to_radians(), [0.0; 3])))
            .map(|p| Pose::new(p.q(), [p.t()[0] + 0.018, p.t()[1], p.t()[2]]).unwrap())
            .collect();
        let m = median_pose_errors(&off, &gt).unwrap();
        assert!((m.t_med - 0.018).abs() < 1e-12 && (m.r_med - 2.62).abs() < 1e-9, "{m:?}");
        assert!(matches!(median_pose_errors(&gt[1..], &gt), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn median_matches_rank_oracle() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..60);
            let gt = random_walk(&mut rng, n.max(2), 1.0)[..n].to_vec();
            let pred = perturb(&mut rng, &gt, 0.5, 0.1);
            let m = median_pose_errors(&pred, &gt).unwrap();
            let t: Vec<f64> = pred.iter().zip(&gt).map(|(p, g)| translation_distance(p, g)).collect();
            let r: Vec<f64> = pred.iter().zip(&gt).map(|(p, g)| rotation_angle_deg(p, g)).collect();
            assert_eq!(m.t_med, naive_median(&t));
            assert_eq!(m.r_med, naive_median(&r));
        }
    }

    #[test]
    fn drift_zero_on_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_walk(&mut rng, 200, 5.0);
        let d = kitti_drift(&gt, &gt).unwrap();
        assert!(!d.empty);
        assert_eq!((d.t_rel, d.r_rel), (0.0, 0.0));
    }

    #[test]
    fn scale_drift_is_one_percent() {
        let gt: Vec<Pose> = (0..1000).map(|i| Pose::from_translation([i as f64, 0.0, 0.0])).collect();
        let pred: Vec<Pose> = (0..1000).map(|i| Pose::from_translation([1.01 * i as f64, 0.0, 0.0])).collect();
        let d = kitti_drift(&pred, &gt).unwrap();
        assert_eq!(d.per_length.len(), 8);
        for l in &d.per_length {
            assert!((l.t_rel - 1.0).abs() < 1e-9, "{l:?}");
            assert_eq!(l.r_rel, 0.0);
        }
        assert!((d.t_rel - 1.0).abs() < 1e-9);
    }

    #[test]
    fn drift_matches_naive_oracle() {
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let gt = random_walk(&mut rng, 200, 3.0);
            let pred = perturb(&mut rng, &gt, 0.3, 0.02);
            let d = kitti_drift(&pred, &gt).unwrap();
            let (t, r, rows) = naive_drift(&pred, &gt);
            assert_eq!(d.t_rel, t);
            assert_eq!(d.r_rel, r);
            let got: Vec<(f64, f64, f64, usize)> = d.per_length.iter().map(|l| (l.length, l.t_rel, l.r_rel, l.segments)).collect();
            assert_eq!(got, rows);
        }
    }

    #[test]
    fn short_trajectory_gives_empty_report() {
        let gt: Vec<Pose> = (0..10).map(|i| Pose::from_translation([i as f64, 0.0, 0.0])).collect();
        let d = kitti_drift(&gt, &gt).unwrap();
        assert!(d.empty && d.per_length.is_empty());
        let partial: Vec<Pose> = (0..260).map(|i| Pose::from_translation([i as f64, 0.0, 0.0])).collect();
        let lengths: Vec<f64> = kitti_drift(&partial, &partial).unwrap().per_length.iter().map(|l| l.length).collect();
        assert_eq!(lengths, vec![100.0, 200.0]);
    }

    #[test]
    fn ties_take_the_earliest_frame() {
        // Exactly 100 m is reached at frame 100, also "reached" at 101.
        let gt: Vec<Pose> = (0..102).map(|i| Pose::from_translation([i as f64, 0.0, 0.0])).collect();
        let d = kitti_drift(&gt, &gt).unwrap();
        assert_eq!(d.per_length[0].segments, 2);
    }

    #[test]
    fn metrics_invariant_to_rigid_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_walk(&mut rng, 180, 4.0);
        let pred = perturb(&mut rng, &gt, 0.4, 0.03);
        let g = Pose::random(&mut rng, 50.0);
        let move_all = |v: &[Pose]| v.iter().map(|p| g.compose(p)).collect::<Vec<_>>();
        let (a, b) = (kitti_drift(&pred, &gt).unwrap(), kitti_drift(&move_all(&pred), &move_all(&gt)).unwrap());
        assert!((a.t_rel - b.t_rel).abs() < 1e-6 && (a.r_rel - b.r_rel).abs() < 1e-6);
        let (m1, m2) = (median_pose_errors(&pred, &gt).unwrap(), median_pose_errors(&move_all(&pred), &move_all(&gt)).unwrap());
        assert!((m1.t_med - m2.t_med).abs() < 1e-6 && (m1.r_med - m2.r_med).abs() < 1e-6);
    }

    #[test]
    fn plot_data_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let gt: Vec<Pose> = (0..300).map(|i| Pose::from_translation([i as f64, 0.0, 0.0])).collect();
        let pred: Vec<Pose> = (0..300).map(|i| Pose::from_translation([1.01 * i as f64, 0.1 / 3.0, 0.0])).collect();
        let path = dir.path().join("traj.tsv");
        let traj = TrajectoryEstimate::new(pred.clone(), Some(Mode::Fused));
        let (drift, _) = emit_plot_data(&traj, &gt, &path, false).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 301);
        let rows = parse_plot_data(&path).unwrap();
        for ((id, p, g), (pp, gg)) in rows.iter().zip(pred.iter().zip(&gt)) {
            assert!(p.iter().zip(pp.t()).all(|(a, b)| (a - b).abs() < 1e-9));
            assert!(g.iter().zip(gg.t()).all(|(a, b)| (a - b).abs() < 1e-9));
            assert!(*id < 300);
        }
        let side = parse_key_values(&fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(side["t_rel"].parse::<f64>().unwrap(), kitti_drift(&pred, &gt).unwrap().t_rel);
        assert_eq!(side["t_rel"].parse::<f64>().unwrap(), drift.t_rel);
        assert_eq!(side["mode"], "fused");
    }

    #[test]
    fn table_formats() {
        let r = DriftReport { t_rel: 1.67, r_rel: 1.54, per_length: vec![], empty: false };
        let t = format_drift_table(&[("03".into(), r.clone()), ("04".into(), r)]);
        assert_eq!(t.lines().last().unwrap(), "Average\t1.67\t1.54");
        let m = format_median_table(&[("chess".into(), MedianReport { t_med: 0.018, r_med: 2.62 })]);
        assert_eq!(m.lines().last().unwrap(), "Average\t0.018\t2.62");
    }
}
