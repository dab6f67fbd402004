//! Radial-kernel point convolution over a discrete rotation group.
//!
//! For centre `c`, group element `g` and output channel `o`:
//! `out[c, g] = Σ_i Σ_k μ(g⁻¹ (x_i − x_c), κ_k) · F_i · W_k`
//! with the linear correlation `μ(y, κ) = max(0, 1 − ‖y − κ‖ / σ)`.

use std::rc::Rc;

use crate::autograd::{Csr, Graph, ParamId, Var};
use crate::error::{Error, Result};
use crate::geometry::group::{icosahedron_vertices, RotationGroup};
use crate::geometry::pose::{mat_t_vec, norm, sub, Vec3};
use crate::tensor::Tensor;

use super::nn::Builder;

#[derive(Clone, Debug, PartialEq)]
pub struct RadialKernel {
    pub center: Vec3,
    pub radius: f64,
    /// `points[0]` is the centre; the rest lie on the `radius` sphere around it.
    pub points: Vec<Vec3>,
}

impl RadialKernel {
    pub fn offsets(&self) -> Vec<Vec3> {
        self.points.iter().map(|p| sub(p, &self.center)).collect()
    }
}

/// Projects each initial kernel point radially onto the `r` sphere around `center`.
pub fn radial_kernel_points(center: Vec3, r: f64, initial: &[Vec3]) -> Result<RadialKernel> {
    if !(r > 0.0) {
        return Err(Error::InvalidArgument(format!("kernel radius must be positive, got {r}")));
    }
    let mut points = Vec::with_capacity(initial.len() + 1);
    points.push(center);
    for p in initial {
        let d = sub(p, &center);
        let len = norm(&d);
        let (polar, azimuth) = if len > 0.0 { ((d[2] / len).clamp(-1.0, 1.0).acos(), d[1].atan2(d[0])) } else { (0.0, 0.0) };
        points.push([
            center[0] + r * polar.sin() * azimuth.cos(),
            center[1] + r * polar.sin() * azimuth.sin(),
            center[2] + r * polar.cos(),
        ]);
    }
    Ok(RadialKernel { center, radius: r, points })
}

/// Centre plus the twelve icosahedron vertex directions at distance `r`.
pub fn canonical_offsets(r: f64) -> Vec<Vec3> {
    let mut out = vec![[0.0; 3]];
    out.extend(icosahedron_vertices().into_iter().map(|v| v.map(|c| c * r)));
    out
}

/// Kernel offsets relative to each centre.
#[derive(Clone, Debug)]
pub enum KernelLayout {
    /// One offset set in the canonical frame, shared by every centre.
    Shared(Vec<Vec3>),
    /// An adaptive offset set per centre.
    PerCenter(Vec<Vec<Vec3>>),
}

impl KernelLayout {
    pub fn size(&self) -> usize {
        match self {
            KernelLayout::Shared(o) => o.len(),
            KernelLayout::PerCenter(o) => o.first().map_or(0, Vec::len),
        }
    }

    fn offsets(&self, c: usize) -> &[Vec3] {
        match self {
            KernelLayout::Shared(o) => o,
            KernelLayout::PerCenter(o) => &o[c],
        }
    }
}

/// Geometry of one convolution call: centres, source points and who neighbours whom.
#[derive(Clone, Copy, Debug)]
pub struct ConvSupport<'a> {
    pub centers: &'a Tensor,
    pub sources: &'a Tensor,
    pub neighbors: &'a [Vec<usize>],
    pub kernel: &'a KernelLayout,
    /// Influence distance of each kernel point.
    pub sigma: f64,
}

/// Sparse correlation map of shape `(C·G) x (S·K)`.
pub fn correlation_map(support: &ConvSupport, group: &RotationGroup) -> Result<Csr> {
    let k = support.kernel.size();
    let s = support.sources.rows();
    if support.neighbors.len() != support.centers.rows() {
        return Err(Error::Shape("one neighbour list per centre is required".into()));
    }
    if let KernelLayout::PerCenter(o) = support.kernel {
        if o.len() != support.centers.rows() || o.iter().any(|v| v.len() != k) {
            return Err(Error::Shape("adaptive kernels must match centres and share one size".into()));
        }
    }
    let mut map = Csr::builder(s * k);
    let mut local = Vec::new();
    for c in 0..support.centers.rows() {
        let xc = support.centers.point(c);
        let offsets = support.kernel.offsets(c);
        for r in group.elements() {
            for &i in &support.neighbors[c] {
                let y = mat_t_vec(r, &sub(&support.sources.point(i), &xc));
                for (kk, off) in offsets.iter().enumerate() {
                    let w = 1.0 - norm(&sub(&y, off)) / support.sigma;
                    if w > 0.0 {
                        local.push((i * k + kk, w));
                    }
                }
            }
            local.sort_by_key(|e| e.0);
            for &(col, w) in &local {
                map.push(col, w);
            }
            local.clear();
            map.finish_row();
        }
    }
    Ok(map)
}

/// `(C·G) x (3K)` table of correlation-weighted neighbour normals seen from each group frame.
pub fn normal_map(support: &ConvSupport, normals: &Tensor, group: &RotationGroup) -> Tensor {
    let k = support.kernel.size();
    let n_g = group.len();
    let mut out = Tensor::zeros(support.centers.rows() * n_g, 3 * k);
    for c in 0..support.centers.rows() {
        let xc = support.centers.point(c);
        let offsets = support.kernel.offsets(c);
        for (gi, r) in group.elements().iter().enumerate() {
            let row = out.row_mut(c * n_g + gi);
            for &i in &support.neighbors[c] {
                let y = mat_t_vec(r, &sub(&support.sources.point(i), &xc));
                let n = mat_t_vec(r, &normals.point(i));
                for (kk, off) in offsets.iter().enumerate() {
                    let w = 1.0 - norm(&sub(&y, off)) / support.sigma;
                    if w > 0.0 {
                        for a in 0..3 {
                            row[kk * 3 + a] += w * n[a];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Learned weights of a radial point convolution.
#[derive(Clone, Debug)]
pub struct RadialConv {
    /// `d_in x (K·d_out)`, column block `k` holding `W_k`.
    pub weight: ParamId,
    /// `(3K) x d_out`, used when sources carry normals.
    pub normal_weight: Option<ParamId>,
    pub kernel_size: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl RadialConv {
    pub fn new(b: &mut Builder, name: &str, kernel_size: usize, d_in: usize, d_out: usize, with_normals: bool) -> Self {
        let mut s = b.sub(name);
        let bound = (3.0 / (d_in * kernel_size).max(1) as f64).sqrt();
        let weight = s.uniform("w", d_in, kernel_size * d_out, bound);
        let normal_weight = with_normals.then(|| s.uniform("wn", 3 * kernel_size, d_out, bound));
        Self { weight, normal_weight, kernel_size, d_in, d_out }
    }

    /// `(C·G) x d_out` output, rows ordered `centre · |G| + g`.
    pub fn forward(
        &self,
        g: &Graph,
        support: &ConvSupport,
        feats: Var,
        normals: Option<&Tensor>,
        group: &RotationGroup,
    ) -> Result<Var> {
        radial_point_conv(g, support, feats, g.param(self.weight), normals.zip(self.normal_weight.map(|w| g.param(w))), group)
    }
}

/// Functional form taking the weights as tape values.
pub fn radial_point_conv(
    g: &Graph,
    support: &ConvSupport,
    feats: Var,
    weight: Var,
    normals: Option<(&Tensor, Var)>,
    group: &RotationGroup,
) -> Result<Var> {
    let k = support.kernel.size();
    let (s, d_in) = g.shape(feats);
    let (w_in, w_cols) = g.shape(weight);
    if s != support.sources.rows() || w_in != d_in || k == 0 || w_cols % k != 0 {
        return Err(Error::Shape(format!(
            "point conv: {s} source rows for {} sources, feature width {d_in}, weight {w_in}x{w_cols}, kernel {k}",
            support.sources.rows()
        )));
    }
    let d_out = w_cols / k;
    let map = Rc::new(correlation_map(support, group)?);
    let projected = g.reshape(g.matmul(feats, weight), s * k, d_out);
    let mut out = g.sparse(map, projected);
    if let Some((n, wn)) = normals {
        let table = g.constant(normal_map(support, n, group));
        out = g.add(out, g.matmul(table, wn));
    }
    Ok(out)
}
