//! Cross-transformation constraint (CTC) losses over K-frame windows.
//!
//! A window of K frames carries K absolute poses and a set of index pairs
//! `(i, j)`; for each pair the network predicts the transform `P_j ∘ P_i⁻¹`.
//! The CTC residual of a pair is the squared difference between the predicted
//! and ground-truth transforms; the relative loss sums the residuals of a
//! window and averages over windows, and the joint loss adds the squared
//! error of the per-frame global poses.
//!
//! Predictions are raw network outputs: the quaternion part is normalized
//! inside the loss, so every gradient here is taken with respect to the raw,
//! unnormalized 7-vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{
    self, cross3, dot3, dot4, hemisphere_sign, norm4, quat_conj, quat_mul, quat_rotate, sub3, Pose,
    Quat, Vec3,
};

/// An unnormalized pose as emitted by a regression head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawPose {
    pub t: Vec3,
    pub q: Quat,
}

impl RawPose {
    pub const ZERO: RawPose = RawPose { t: [0.0; 3], q: [0.0; 4] };

    /// Layout `(tx, ty, tz, qw, qx, qy, qz)`, matching the translation and
    /// quaternion heads.
    pub fn from_array(v: [f64; 7]) -> RawPose {
        RawPose { t: [v[0], v[1], v[2]], q: [v[3], v[4], v[5], v[6]] }
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.t[0], self.t[1], self.t[2], self.q[0], self.q[1], self.q[2], self.q[3]]
    }

    pub fn to_pose(&self) -> Result<Pose> {
        Pose::new(self.q, self.t)
    }

    fn is_finite(&self) -> bool {
        self.t.iter().chain(self.q.iter()).all(|v| v.is_finite())
    }

    fn add_assign(&mut self, o: &RawPose) {
        for i in 0..3 {
            self.t[i] += o.t[i];
        }
        for i in 0..4 {
            self.q[i] += o.q[i];
        }
    }
}

impl From<Pose> for RawPose {
    fn from(p: Pose) -> Self {
        RawPose { t: p.t(), q: p.q() }
    }
}

/// The index pairs `(i, j)` of a K-frame window that receive a CTC residual.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSpec {
    k: usize,
    pairs: Vec<(usize, usize)>,
}

impl PairSpec {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Dyadic pair set: strides `s = 1, 2, 4, ...` anchored at multiples of `s`,
/// then `(0, K-1)` if not already present. For K = 5 this gives
/// `(0,1) (1,2) (2,3) (3,4) (0,2) (2,4) (0,4)`.
pub fn make_pair_spec(k: usize) -> Result<PairSpec> {
    if !(2..=32).contains(&k) {
        return Err(Error::InvalidK(k));
    }
    let mut pairs = Vec::new();
    let mut s = 1;
    while s < k {
        pairs.extend((0..k).step_by(s).filter(|i| i + s < k).map(|i| (i, i + s)));
        s *= 2;
    }
    if !pairs.contains(&(0, k - 1)) {
        pairs.push((0, k - 1));
    }
    Ok(PairSpec { k, pairs })
}

/// Ground truth for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowTarget {
    pub gt_global: Vec<Pose>,
    pub gt_pairs: Vec<Pose>,
}

impl WindowTarget {
    pub fn from_globals(gt_global: Vec<Pose>, spec: &PairSpec) -> Result<WindowTarget> {
        if gt_global.len() != spec.k {
            return Err(Error::shape(format!("{} global poses for K={}", gt_global.len(), spec.k)));
        }
        let gt_pairs = spec.pairs.iter().map(|&(i, j)| pose::relative(&gt_global[i], &gt_global[j])).collect();
        Ok(WindowTarget { gt_global, gt_pairs })
    }

    /// Largest deviation of any stored pair from `relative(gt_i, gt_j)`.
    pub fn pair_inconsistency(&self, spec: &PairSpec) -> f64 {
        spec.pairs
            .iter()
            .zip(&self.gt_pairs)
            .map(|(&(i, j), p)| pose::relative(&self.gt_global[i], &self.gt_global[j]).max_abs_diff(p))
            .fold(0.0, f64::max)
    }
}

/// Network output for one window. Also used to carry gradients of the same shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowPrediction {
    pub pred_global: Vec<RawPose>,
    pub pred_pairs: Vec<RawPose>,
}

impl WindowPrediction {
    pub fn zeros_like(&self) -> WindowPrediction {
        WindowPrediction {
            pred_global: vec![RawPose::ZERO; self.pred_global.len()],
            pred_pairs: vec![RawPose::ZERO; self.pred_pairs.len()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta_rot: f64,
    pub lambda_global: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { beta_rot: 1.0, lambda_global: 1.0 }
    }
}

impl LossWeights {
    pub fn new(beta_rot: f64, lambda_global: f64) -> Result<LossWeights> {
        if !(beta_rot > 0.0 && lambda_global > 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be positive (beta_rot={beta_rot}, lambda_global={lambda_global})"
            )));
        }
        Ok(LossWeights { beta_rot, lambda_global })
    }
}

/// Per-batch loss terms, each already averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub ctc: f64,
    pub global: f64,
    pub total: f64,
}

/// `‖t - t̂‖² + β‖q̃ - q̂‖²` with `q̃` the normalized prediction and the ground
/// truth sign-aligned to it.
pub fn pose_mse(pred: &RawPose, gt: &Pose, w: &LossWeights) -> Result<f64> {
    pose_mse_grad(pred, gt, w).map(|(l, _)| l)
}

pub fn pose_mse_grad(pred: &RawPose, gt: &Pose, w: &LossWeights) -> Result<(f64, RawPose)> {
    let n = norm4(pred.q);
    if !(n > 1e-12) {
        return Err(Error::DegenerateQuaternion { norm: n });
    }
    let qh = pred.q.map(|c| c / n);
    let s = hemisphere_sign(qh);
    let qt = qh.map(|c| s * c);
    let g = gt.q();
    let align = if dot4(qt, g) < 0.0 { -1.0 } else { 1.0 };
    let ga = g.map(|c| align * c);

    let dt = sub3(pred.t, gt.t());
    let dq: Quat = std::array::from_fn(|i| qt[i] - ga[i]);
    let loss = dot3(dt, dt) + w.beta_rot * dot4(dq, dq);

    // d/dq of β‖s·q/|q| - g'‖² = 2β s/|q| (q̂ (q̂·g') - g')
    let proj = dot4(qh, ga);
    let k = 2.0 * w.beta_rot * s / n;
    let grad = RawPose { t: dt.map(|c| 2.0 * c), q: std::array::from_fn(|i| k * (qh[i] * proj - ga[i])) };
    Ok((loss, grad))
}

fn check_window(pred: &WindowPrediction, tgt: &WindowTarget, spec: &PairSpec, need_global: bool) -> Result<()> {
    if pred.pred_pairs.len() != spec.len() || tgt.gt_pairs.len() != spec.len() {
        return Err(Error::shape(format!(
            "pair count: predicted {}, target {}, spec {}",
            pred.pred_pairs.len(),
            tgt.gt_pairs.len(),
            spec.len()
        )));
    }
    if need_global && (pred.pred_global.len() != spec.k || tgt.gt_global.len() != spec.k) {
        return Err(Error::shape(format!(
            "global count: predicted {}, target {}, K {}",
            pred.pred_global.len(),
            tgt.gt_global.len(),
            spec.k
        )));
    }
    if !pred.pred_pairs.iter().chain(&pred.pred_global).all(RawPose::is_finite) {
        return Err(Error::shape("non-finite prediction"));
    }
    Ok(())
}

/// One residual `L_k` per pair of `spec`, in order.
pub fn ctc_residuals(
    pred: &WindowPrediction,
    tgt: &WindowTarget,
    spec: &PairSpec,
    w: &LossWeights,
) -> Result<Vec<f64>> {
    check_window(pred, tgt, spec, false)?;
    pred.pred_pairs.iter().zip(&tgt.gt_pairs).map(|(p, g)| pose_mse(p, g, w)).collect()
}

/// Mean over windows of the summed CTC residuals.
pub fn relative_loss(batch: &[(WindowPrediction, WindowTarget)], spec: &PairSpec, w: &LossWeights) -> Result<f64> {
    relative_loss_grad(batch, spec, w).map(|(b, _)| b.total)
}

/// Mean over windows of the CTC sum plus `λ` times the summed global pose errors.
pub fn joint_loss(batch: &[(WindowPrediction, WindowTarget)], spec: &PairSpec, w: &LossWeights) -> Result<f64> {
    joint_loss_grad(batch, spec, w).map(|(b, _)| b.total)
}

pub fn relative_loss_grad(
    batch: &[(WindowPrediction, WindowTarget)],
    spec: &PairSpec,
    w: &LossWeights,
) -> Result<(LossBreakdown, Vec<WindowPrediction>)> {
    batch_loss_grad(batch, spec, w, false)
}

pub fn joint_loss_grad(
    batch: &[(WindowPrediction, WindowTarget)],
    spec: &PairSpec,
    w: &LossWeights,
) -> Result<(LossBreakdown, Vec<WindowPrediction>)> {
    batch_loss_grad(batch, spec, w, true)
}

fn batch_loss_grad(
    batch: &[(WindowPrediction, WindowTarget)],
    spec: &PairSpec,
    w: &LossWeights,
    with_global: bool,
) -> Result<(LossBreakdown, Vec<WindowPrediction>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let inv_n = 1.0 / batch.len() as f64;
    let mut ctc = 0.0;
    let mut global = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for (pred, tgt) in batch {
        check_window(pred, tgt, spec, with_global)?;
        let mut g = pred.zeros_like();
        for (k, (p, gt)) in pred.pred_pairs.iter().zip(&tgt.gt_pairs).enumerate() {
            let (l, d) = pose_mse_grad(p, gt, w)?;
            ctc += l;
            g.pred_pairs[k] = scale(&d, inv_n);
        }
        if with_global {
            for (j, (p, gt)) in pred.pred_global.iter().zip(&tgt.gt_global).enumerate() {
                let (l, d) = pose_mse_grad(p, gt, w)?;
                global += l;
                g.pred_global[j] = scale(&d, inv_n * w.lambda_global);
            }
        }
        grads.push(g);
    }
    let ctc = ctc * inv_n;
    let global = global * inv_n;
    let total = ctc + w.lambda_global * global;
    Ok((LossBreakdown { ctc, global, total }, grads))
}

fn scale(p: &RawPose, s: f64) -> RawPose {
    RawPose { t: p.t.map(|c| c * s), q: p.q.map(|c| c * s) }
}

// ---------------------------------------------------------------------------
// Building pair predictions from per-step outputs, with vector-Jacobian products.

fn normalize(q: Quat) -> Result<(Quat, f64)> {
    let n = norm4(q);
    if !(n > 1e-12) {
        return Err(Error::DegenerateQuaternion { norm: n });
    }
    Ok((q.map(|c| c / n), n))
}

fn normalize_vjp(qh: Quat, n: f64, g: Quat) -> Quat {
    let p = dot4(qh, g);
    std::array::from_fn(|i| (g[i] - qh[i] * p) / n)
}

/// `∂⟨g, R(q) v⟩ / ∂q` using the homogeneous quadratic form of `R(q)`.
fn rotate_vjp_q(q: Quat, v: Vec3, g: Vec3) -> Quat {
    let w = q[0];
    let u = [q[1], q[2], q[3]];
    let gv = dot3(g, v);
    let ug = dot3(u, g);
    let uv = dot3(u, v);
    let uxv = cross3(u, v);
    let vxg = cross3(v, g);
    [
        2.0 * w * gv + 2.0 * dot3(g, uxv),
        -2.0 * u[0] * gv + 2.0 * v[0] * ug + 2.0 * uv * g[0] + 2.0 * w * vxg[0],
        -2.0 * u[1] * gv + 2.0 * v[1] * ug + 2.0 * uv * g[1] + 2.0 * w * vxg[1],
        -2.0 * u[2] * gv + 2.0 * v[2] * ug + 2.0 * uv * g[2] + 2.0 * w * vxg[2],
    ]
}

fn compose_unit(a: &RawPose, b: &RawPose) -> RawPose {
    let r = quat_rotate(a.q, b.t);
    RawPose { q: quat_mul(a.q, b.q), t: [r[0] + a.t[0], r[1] + a.t[1], r[2] + a.t[2]] }
}

/// Gradients of `compose_unit(a, b)` with respect to `a` and `b`.
fn compose_unit_vjp(a: &RawPose, b: &RawPose, g: &RawPose) -> (RawPose, RawPose) {
    let ga_q_prod = quat_mul(g.q, quat_conj(b.q));
    let ga_q_rot = rotate_vjp_q(a.q, b.t, g.t);
    let ga = RawPose { t: g.t, q: std::array::from_fn(|i| ga_q_prod[i] + ga_q_rot[i]) };
    let gb = RawPose { t: quat_rotate(quat_conj(a.q), g.t), q: quat_mul(quat_conj(a.q), g.q) };
    (ga, gb)
}

fn inverse_unit(p: &RawPose) -> RawPose {
    let qc = quat_conj(p.q);
    RawPose { q: qc, t: quat_rotate(qc, p.t).map(|c| -c) }
}

fn inverse_unit_vjp(p: &RawPose, g: &RawPose) -> RawPose {
    let qc = quat_conj(p.q);
    // t' = -R(q*) t
    let gt = quat_rotate(p.q, g.t).map(|c| -c);
    let gqc_rot = rotate_vjp_q(qc, p.t, g.t).map(|c| -c);
    let gqc: Quat = std::array::from_fn(|i| g.q[i] + gqc_rot[i]);
    RawPose { t: gt, q: quat_conj(gqc) }
}

fn normalized(p: &RawPose) -> Result<(RawPose, f64)> {
    let (q, n) = normalize(p.q)?;
    Ok((RawPose { t: p.t, q }, n))
}

fn check_steps(n: usize, expected: usize, what: &str) -> Result<()> {
    if n != expected {
        return Err(Error::shape(format!("{n} {what}, expected {expected}")));
    }
    Ok(())
}

/// Pair predictions from the K-1 adjacent transforms `i → i+1`.
///
/// Adjacent pairs pass the raw prediction through unchanged; longer pairs are
/// the composition `A_{j-1} ∘ … ∘ A_i` of the normalized adjacent transforms.
pub fn pairs_from_adjacent(adjacent: &[RawPose], spec: &PairSpec) -> Result<Vec<RawPose>> {
    check_steps(adjacent.len(), spec.k - 1, "adjacent transforms")?;
    spec.pairs
        .iter()
        .map(|&(i, j)| {
            if j == i + 1 {
                return Ok(adjacent[i]);
            }
            let mut acc = normalized(&adjacent[i])?.0;
            for a in &adjacent[i + 1..j] {
                acc = compose_unit(&normalized(a)?.0, &acc);
            }
            Ok(acc)
        })
        .collect()
}

/// Backpropagates pair gradients onto the adjacent transforms.
pub fn pairs_from_adjacent_vjp(adjacent: &[RawPose], spec: &PairSpec, pair_grads: &[RawPose]) -> Result<Vec<RawPose>> {
    check_steps(adjacent.len(), spec.k - 1, "adjacent transforms")?;
    check_steps(pair_grads.len(), spec.len(), "pair gradients")?;
    let units = adjacent.iter().map(normalized).collect::<Result<Vec<_>>>()?;
    let mut out = vec![RawPose::ZERO; adjacent.len()];
    for (&(i, j), g) in spec.pairs.iter().zip(pair_grads) {
        if j == i + 1 {
            out[i].add_assign(g);
            continue;
        }
        // Forward chain: acc_i = Â_i, acc_m = Â_m ∘ acc_{m-1}.
        let mut chain = vec![units[i].0];
        for (u, _) in &units[i + 1..j] {
            let next = compose_unit(u, chain.last().expect("nonempty"));
            chain.push(next);
        }
        let mut g_acc = *g;
        for m in (i + 1..j).rev() {
            let prev = &chain[m - 1 - i];
            let (g_a, g_prev) = compose_unit_vjp(&units[m].0, prev, &g_acc);
            out[m].add_assign(&raw_grad(&units[m], &g_a));
            g_acc = g_prev;
        }
        out[i].add_assign(&raw_grad(&units[i], &g_acc));
    }
    Ok(out)
}

/// Pair predictions derived from per-frame global predictions:
/// `relative(Ĝ_i, Ĝ_j)` with normalized quaternions.
pub fn pairs_from_globals(globals: &[RawPose], spec: &PairSpec) -> Result<Vec<RawPose>> {
    check_steps(globals.len(), spec.k, "global poses")?;
    let units = globals.iter().map(normalized).collect::<Result<Vec<_>>>()?;
    Ok(spec.pairs.iter().map(|&(i, j)| compose_unit(&units[j].0, &inverse_unit(&units[i].0))).collect())
}

pub fn pairs_from_globals_vjp(globals: &[RawPose], spec: &PairSpec, pair_grads: &[RawPose]) -> Result<Vec<RawPose>> {
    check_steps(globals.len(), spec.k, "global poses")?;
    check_steps(pair_grads.len(), spec.len(), "pair gradients")?;
    let units = globals.iter().map(normalized).collect::<Result<Vec<_>>>()?;
    let mut out = vec![RawPose::ZERO; globals.len()];
    for (&(i, j), g) in spec.pairs.iter().zip(pair_grads) {
        let inv_i = inverse_unit(&units[i].0);
        let (g_j, g_inv) = compose_unit_vjp(&units[j].0, &inv_i, g);
        let g_i = inverse_unit_vjp(&units[i].0, &g_inv);
        out[j].add_assign(&raw_grad(&units[j], &g_j));
        out[i].add_assign(&raw_grad(&units[i], &g_i));
    }
    Ok(out)
}

fn raw_grad(unit: &(RawPose, f64), g: &RawPose) -> RawPose {
    RawPose { t: g.t, q: normalize_vjp(unit.0.q, unit.1, g.q) }
}
