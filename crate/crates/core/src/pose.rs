//! Rigid-body poses as unit quaternion plus translation.
//!
//! Conventions used everywhere in this crate:
//!
//! * quaternions are stored `(w, x, y, z)` and multiply with the Hamilton rule;
//! * `compose(a, b)` has homogeneous-matrix semantics, `M(a·b) = M(a)·M(b)`;
//! * every stored quaternion lies on the canonical hemisphere (`w > 0`, or
//!   `w == 0` and the first nonzero of `x, y, z` positive).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Quat = [f64; 4];
pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

const DEGENERATE_NORM: f64 = 1e-12;
const ROTATION_TOLERANCE: f64 = 1e-3;

/// A 6-DoF pose `(q, t)`. Absolute poses are camera-to-world.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    q: Quat,
    t: Vec3,
}

/// A 3×4 row-major rigid transform `[R | t]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseMatrix(pub [[f64; 4]; 3]);

impl Default for Pose {
    fn default() -> Self {
        Pose::IDENTITY
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose { q: [1.0, 0.0, 0.0, 0.0], t: [0.0; 3] };

    /// Builds a pose from any nonzero quaternion; the quaternion is normalized
    /// and moved to the canonical hemisphere.
    pub fn new(q: Quat, t: Vec3) -> Result<Pose> {
        Ok(Pose { q: canonicalize(q)?, t })
    }

    pub fn from_translation(t: Vec3) -> Pose {
        Pose { q: Pose::IDENTITY.q, t }
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64, t: Vec3) -> Pose {
        let n = norm3(axis);
        assert!(n > 0.0, "rotation axis must be nonzero");
        let (s, c) = (0.5 * angle).sin_cos();
        let q = [c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n];
        Pose { q: canonical_unit(q), t }
    }

    pub fn q(&self) -> Quat {
        self.q
    }

    pub fn t(&self) -> Vec3 {
        self.t
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        inverse(self)
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_matrix(self.q)
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        add3(quat_rotate(self.q, p), self.t)
    }

    pub fn to_matrix(&self) -> PoseMatrix {
        to_matrix(self)
    }

    pub fn from_matrix(m: &PoseMatrix) -> Result<Pose> {
        from_matrix(m)
    }

    /// The 7-vector `(tx, ty, tz, qw, qx, qy, qz)`.
    pub fn to_array(&self) -> [f64; 7] {
        [self.t[0], self.t[1], self.t[2], self.q[0], self.q[1], self.q[2], self.q[3]]
    }

    /// Largest componentwise difference, treating `q` and `-q` as equal.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        let sign = if dot4(self.q, other.q) < 0.0 { -1.0 } else { 1.0 };
        let dq = (0..4).map(|i| (self.q[i] - sign * other.q[i]).abs());
        let dt = (0..3).map(|i| (self.t[i] - other.t[i]).abs());
        dq.chain(dt).fold(0.0, f64::max)
    }

    /// Uniformly random rotation with translation components in `[-t_scale, t_scale]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, t_scale: f64) -> Pose {
        let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let tau = std::f64::consts::TAU;
        let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
        let q = [b * (tau * u3).cos(), a * (tau * u2).sin(), a * (tau * u2).cos(), b * (tau * u3).sin()];
        let t = [
            rng.random_range(-t_scale..=t_scale),
            rng.random_range(-t_scale..=t_scale),
            rng.random_range(-t_scale..=t_scale),
        ];
        Pose { q: canonical_unit(q), t }
    }
}

impl PoseMatrix {
    pub const IDENTITY: PoseMatrix =
        PoseMatrix([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]);

    pub fn from_row_major(v: &[f64; 12]) -> PoseMatrix {
        let mut m = [[0.0; 4]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            row.copy_from_slice(&v[4 * r..4 * r + 4]);
        }
        PoseMatrix(m)
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let mut v = [0.0; 12];
        for r in 0..3 {
            v[4 * r..4 * r + 4].copy_from_slice(&self.0[r]);
        }
        v
    }

    pub fn rotation(&self) -> Mat3 {
        let m = &self.0;
        [[m[0][0], m[0][1], m[0][2]], [m[1][0], m[1][1], m[1][2]], [m[2][0], m[2][1], m[2][2]]]
    }

    pub fn translation(&self) -> Vec3 {
        [self.0[0][3], self.0[1][3], self.0[2][3]]
    }
}

/// Normalizes `q` and moves it to the canonical hemisphere.
pub fn canonicalize(q: Quat) -> Result<Quat> {
    let n = norm4(q);
    if !(n > DEGENERATE_NORM) {
        return Err(Error::DegenerateQuaternion { norm: n });
    }
    Ok(canonical_unit([q[0] / n, q[1] / n, q[2] / n, q[3] / n]))
}

/// Sign (+1 or -1) that moves `q` onto the canonical hemisphere.
pub fn hemisphere_sign(q: Quat) -> f64 {
    let lead = if q[0] != 0.0 {
        q[0]
    } else {
        q[1..].iter().copied().find(|c| *c != 0.0).unwrap_or(0.0)
    };
    if lead < 0.0 {
        -1.0
    } else {
        1.0
    }
}

fn canonical_unit(q: Quat) -> Quat {
    let s = hemisphere_sign(q);
    [s * q[0], s * q[1], s * q[2], s * q[3]]
}

/// `a ∘ b`: apply `b`, then `a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    let q = quat_mul(a.q, b.q);
    let n = norm4(q);
    Pose {
        q: canonical_unit([q[0] / n, q[1] / n, q[2] / n, q[3] / n]),
        t: add3(quat_rotate(a.q, b.t), a.t),
    }
}

pub fn inverse(p: &Pose) -> Pose {
    let qc = quat_conj(p.q);
    let t = quat_rotate(qc, p.t);
    Pose { q: canonical_unit(qc), t: [-t[0], -t[1], -t[2]] }
}

/// The transform taking `from` to `to`: `to ∘ from⁻¹`.
pub fn relative(from: &Pose, to: &Pose) -> Pose {
    compose(to, &inverse(from))
}

/// Geodesic angle between the two orientations, in degrees within `[0, 180]`.
pub fn rotation_angle_deg(a: &Pose, b: &Pose) -> f64 {
    let d = dot4(a.q, b.q).abs().clamp(-1.0, 1.0);
    (2.0 * d.acos()).to_degrees()
}

pub fn translation_distance(a: &Pose, b: &Pose) -> f64 {
    norm3(sub3(a.t, b.t))
}

pub fn to_matrix(p: &Pose) -> PoseMatrix {
    let r = quat_to_matrix(p.q);
    let mut m = [[0.0; 4]; 3];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&r[i]);
        m[i][3] = p.t[i];
    }
    PoseMatrix(m)
}

/// Converts a rigid matrix to a pose. Rotation blocks within 1e-3 of
/// orthonormal are projected onto the nearest rotation first.
pub fn from_matrix(m: &PoseMatrix) -> Result<Pose> {
    let r = m.rotation();
    if r.iter().flatten().chain(m.translation().iter()).any(|v| !v.is_finite()) {
        return Err(Error::NotARotation("non-finite entry".into()));
    }
    let mut dev: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let g: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let id = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((g - id).abs());
        }
    }
    let det = det3(&r);
    if dev > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(Error::NotARotation(format!("|RᵀR - I|max = {dev:.3e}, det = {det:.6}")));
    }
    let r = if dev > 1e-14 { nearest_rotation(&r) } else { r };
    Ok(Pose { q: matrix_to_quat(&r), t: m.translation() })
}

/// Polar-decomposition projection `U Vᵀ`.
fn nearest_rotation(r: &Mat3) -> Mat3 {
    let m = nalgebra::Matrix3::from_fn(|i, j| r[i][j]);
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let p = u * vt;
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = p[(i, j)];
        }
    }
    out
}

fn matrix_to_quat(m: &Mat3) -> Quat {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [(m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s]
    };
    let n = norm4(q);
    canonical_unit([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

// Small fixed-size helpers shared with the loss gradients.

pub fn quat_mul(a: Quat, b: Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn quat_conj(q: Quat) -> Quat {
    [q[0], -q[1], -q[2], -q[3]]
}

/// Rotates `v` by the unit quaternion `q`.
pub fn quat_rotate(q: Quat, v: Vec3) -> Vec3 {
    let u = [q[1], q[2], q[3]];
    let c1 = cross3(u, v);
    let c2 = cross3(u, c1);
    [
        v[0] + 2.0 * (q[0] * c1[0] + c2[0]),
        v[1] + 2.0 * (q[0] * c1[1] + c2[1]),
        v[2] + 2.0 * (q[0] * c1[2] + c2[2]),
    ]
}

pub fn quat_to_matrix(q: Quat) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn dot4(a: Quat, b: Quat) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

pub fn norm4(q: Quat) -> f64 {
    dot4(q, q).sqrt()
}

pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm3(v: Vec3) -> f64 {
    dot3(v, v).sqrt()
}

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}
