//! Oriented box intersection over union by convex polytope clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::pose::{cross, dot, mat_t_vec, mat_vec, sub, Mat3, Pose, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub pose: Pose,
    /// Full side lengths along the box's local axes.
    pub extents: Vec3,
}

impl OrientedBox {
    pub fn new(pose: Pose, extents: Vec3) -> Result<Self> {
        let b = Self { pose, extents };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        if self.extents.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return Err(Error::InvalidArgument(format!("degenerate box extents {:?}", self.extents)));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.extents.iter().product()
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let r = self.pose.matrix();
        let t = self.pose.translation;
        let h = self.extents.map(|e| e / 2.0);
        let mut out = [[0.0; 3]; 8];
        for (i, c) in out.iter_mut().enumerate() {
            let local = [
                if i & 1 == 0 { -h[0] } else { h[0] },
                if i & 2 == 0 { -h[1] } else { h[1] },
                if i & 4 == 0 { -h[2] } else { h[2] },
            ];
            let w = mat_vec(&r, &local);
            *c = [w[0] + t[0], w[1] + t[1], w[2] + t[2]];
        }
        out
    }

    /// Whether a world point lies inside (boundary included).
    pub fn contains(&self, p: &Vec3) -> bool {
        let local = mat_t_vec(&self.pose.matrix(), &sub(p, &self.pose.translation));
        (0..3).all(|k| local[k].abs() <= self.extents[k] / 2.0)
    }

    /// Six outward planes `n · x <= d`.
    fn planes(&self) -> [(Vec3, f64); 6] {
        let r = self.pose.matrix();
        let t = self.pose.translation;
        let mut out = [([0.0; 3], 0.0); 6];
        for k in 0..3 {
            let axis = [r[0][k], r[1][k], r[2][k]];
            let c = dot(&axis, &t);
            let h = self.extents[k] / 2.0;
            out[2 * k] = (axis, c + h);
            out[2 * k + 1] = ([-axis[0], -axis[1], -axis[2]], -c + h);
        }
        out
    }

    /// Faces as corner loops.
    fn faces(&self) -> Vec<Vec<Vec3>> {
        let c = self.corners();
        [[0, 2, 6, 4], [1, 5, 7, 3], [0, 4, 5, 1], [2, 3, 7, 6], [0, 1, 3, 2], [4, 6, 7, 5]]
            .iter()
            .map(|f| f.iter().map(|&i| c[i]).collect())
            .collect()
    }
}

/// Volume of a convex polytope as a sum of pyramids from an interior point,
/// independent of face winding.
fn polytope_volume(faces: &[Vec<Vec3>]) -> f64 {
    let count: usize = faces.iter().map(|f| f.len()).sum();
    if count == 0 {
        return 0.0;
    }
    let mut c = [0.0; 3];
    for p in faces.iter().flatten() {
        for k in 0..3 {
            c[k] += p[k] / count as f64;
        }
    }
    let mut v = 0.0;
    for f in faces {
        // Newell normal, twice the area in magnitude
        let mut n = [0.0; 3];
        for i in 0..f.len() {
            let (a, b) = (f[i], f[(i + 1) % f.len()]);
            n[0] += (a[1] - b[1]) * (a[2] + b[2]);
            n[1] += (a[2] - b[2]) * (a[0] + b[0]);
            n[2] += (a[0] - b[0]) * (a[1] + b[1]);
        }
        v += dot(&n, &sub(&f[0], &c)).abs() / 6.0;
    }
    v
}

/// Clips a closed convex polytope by `n · x <= d`, capping the cut.
fn clip(faces: Vec<Vec<Vec3>>, n: &Vec3, d: f64) -> Vec<Vec<Vec3>> {
    const EPS: f64 = 1e-10;
    let mut out = Vec::with_capacity(faces.len() + 1);
    let mut cut: Vec<Vec3> = Vec::new();
    // a face already lying on the plane is the cap
    let mut capped = false;
    for f in faces {
        if f.iter().all(|p| (dot(n, p) - d).abs() <= EPS) {
            capped = true;
            out.push(f);
            continue;
        }
        let mut poly = Vec::with_capacity(f.len() + 2);
        for i in 0..f.len() {
            let a = f[i];
            let b = f[(i + 1) % f.len()];
            let da = dot(n, &a) - d;
            let db = dot(n, &b) - d;
            if da <= EPS {
                poly.push(a);
            }
            if (da < -EPS && db > EPS) || (da > EPS && db < -EPS) {
                let s = da / (da - db);
                let p = [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1]), a[2] + s * (b[2] - a[2])];
                poly.push(p);
                cut.push(p);
            } else if da.abs() <= EPS {
                cut.push(a);
            }
        }
        if poly.len() >= 3 {
            out.push(poly);
        }
    }
    if !capped && cut.len() >= 3 {
        let m = cut.len() as f64;
        let c = cut.iter().fold([0.0; 3], |acc, p| [acc[0] + p[0] / m, acc[1] + p[1] / m, acc[2] + p[2] / m]);
        let helper = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let u = cross(n, &helper);
        let v = cross(n, &u);
        let mut ring: Vec<(f64, Vec3)> = cut
            .iter()
            .map(|p| {
                let q = sub(p, &c);
                (dot(&q, &v).atan2(dot(&q, &u)), *p)
            })
            .collect();
        ring.sort_by(|a, b| a.0.total_cmp(&b.0));
        ring.dedup_by(|a, b| {
            let q = sub(&a.1, &b.1);
            dot(&q, &q) < 1e-24
        });
        if ring.len() >= 3 {
            out.push(ring.into_iter().map(|(_, p)| p).collect());
        }
    }
    out
}

fn same_rotation(a: &Mat3, b: &Mat3) -> bool {
    a == b
}

/// Volume of `a ∩ b`.
pub fn intersection_volume(a: &OrientedBox, b: &OrientedBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let (ra, rb) = (a.pose.matrix(), b.pose.matrix());
    if same_rotation(&ra, &rb) {
        // both boxes are axis-aligned in a's frame
        let d = mat_t_vec(&ra, &sub(&b.pose.translation, &a.pose.translation));
        let mut v = 1.0;
        for k in 0..3 {
            let lo = (-a.extents[k] / 2.0).max(d[k] - b.extents[k] / 2.0);
            let hi = (a.extents[k] / 2.0).min(d[k] + b.extents[k] / 2.0);
            v *= (hi - lo).max(0.0);
        }
        return Ok(v);
    }
    let mut faces = a.faces();
    for (n, d) in b.planes() {
        faces = clip(faces, &n, d);
        if faces.len() < 4 {
            return Ok(0.0);
        }
    }
    Ok(polytope_volume(&faces).max(0.0))
}

pub fn iou3d(a: &OrientedBox, b: &OrientedBox) -> Result<f64> {
    let inter = intersection_volume(a, b)?;
    let union = a.volume() + b.volume() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}
