use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];
/// `(w, x, y, z)`.
pub type Quat = [f64; 4];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

#[inline]
pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// `mᵀ v`.
#[inline]
pub fn mat_t_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn mat_to_tensor(m: &Mat3) -> Tensor {
    Tensor::from_fn(3, 3, |i, j| m[i][j])
}

#[inline]
pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_matrix(q: Quat) -> Result<Mat3> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidArgument(format!("cannot convert quaternion {q:?} to a rotation")));
    }
    Ok(quat_to_matrix_unchecked(quat_normalize(q)))
}

pub(crate) fn quat_to_matrix_unchecked(q: Quat) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Quaternion of a rotation matrix, canonical sign.
pub fn matrix_to_quat(m: &Mat3) -> Quat {
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
    quat_canonical(quat_normalize(q))
}

pub fn quat_normalize(q: Quat) -> Quat {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Flips the sign so that `w ≥ 0` (ties on `w = 0` resolved on the first nonzero entry).
pub fn quat_canonical(q: Quat) -> Quat {
    let lead = q.iter().copied().find(|v| *v != 0.0).unwrap_or(1.0);
    let flip = q[0] < 0.0 || (q[0] == 0.0 && lead < 0.0);
    if flip {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        q
    }
}

/// Hamilton product `a ⊗ b`.
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

pub fn axis_angle(axis: Vec3, angle: f64) -> Quat {
    let n = norm(&axis);
    let s = (angle / 2.0).sin() / n;
    quat_canonical([(angle / 2.0).cos(), axis[0] * s, axis[1] * s, axis[2] * s])
}

/// Geodesic angle between two rotations, radians in `[0, π]`.
pub fn geodesic_angle(a: Quat, b: Quat) -> f64 {
    let d = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]).abs().min(1.0);
    2.0 * d.acos()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: [1.0, 0.0, 0.0, 0.0], translation: [0.0; 3] }
    }

    /// Normalizes and canonicalizes the quaternion.
    pub fn new(rotation: Quat, translation: Vec3) -> Result<Self> {
        let n = rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() || translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid pose {rotation:?} {translation:?}")));
        }
        Ok(Self { rotation: quat_canonical(quat_normalize(rotation)), translation })
    }

    pub fn from_matrix(m: &Mat3, translation: Vec3) -> Self {
        Self { rotation: matrix_to_quat(m), translation }
    }

    pub fn matrix(&self) -> Mat3 {
        quat_to_matrix_unchecked(self.rotation)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub value: f64,
    pub extents: Vec3,
}

impl Scale {
    /// `canonical_extents` are the bounding-box side lengths of the canonical shape.
    pub fn new(value: f64, canonical_extents: Vec3) -> Result<Self> {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {value}")));
        }
        let extents = canonical_extents.map(|e| e * value);
        if extents.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::InvalidArgument(format!("degenerate extents {extents:?}")));
        }
        Ok(Self { value, extents })
    }

    /// A uniform scale without extent information (unit canonical cube).
    pub fn uniform(value: f64) -> Result<Self> {
        Self::new(value, [1.0; 3])
    }
}

/// `s · R · x + t` for every row of an `N x 3` tensor.
pub fn apply_pose(points: &Tensor, pose: &Pose, scale: &Scale) -> Result<Tensor> {
    if points.cols() != 3 {
        return Err(Error::Shape(format!("apply_pose needs N x 3 points, got {:?}", points.shape())));
    }
    if !points.is_finite() {
        return Err(Error::NonFinite("apply_pose input".into()));
    }
    if !(scale.value > 0.0) {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {}", scale.value)));
    }
    Ok(transform_points(points, &pose.matrix(), scale.value, &pose.translation))
}

pub(crate) fn transform_points(points: &Tensor, r: &Mat3, s: f64, t: &Vec3) -> Tensor {
    let mut out = Tensor::zeros(points.rows(), 3);
    for i in 0..points.rows() {
        let y = mat_vec(r, &points.point(i));
        out.row_mut(i).copy_from_slice(&[s * y[0] + t[0], s * y[1] + t[1], s * y[2] + t[2]]);
    }
    out
}

/// Rotates every row by `r`.
pub fn rotate_points(points: &Tensor, r: &Mat3) -> Tensor {
    transform_points(points, r, 1.0, &[0.0; 3])
}
