//! Pose and size hypothesis decoders over the group feature maps.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::group::RotationGroup;
use crate::geometry::pose::{mat_vec, quat_canonical, quat_mul, quat_normalize, Pose, Quat, Vec3};
use crate::layers::nn::{Activation, Builder, Linear, Mlp};
use crate::tensor::Tensor;

/// `K x |G|` pose and size hypotheses.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisSet {
    pub poses: Vec<Vec<Pose>>,
    pub sizes: Vec<Vec<f64>>,
}

impl HypothesisSet {
    pub fn new(poses: Vec<Vec<Pose>>, sizes: Vec<Vec<f64>>) -> Result<Self> {
        if poses.len() != sizes.len() {
            return Err(Error::Shape(format!("{} pose rows but {} size rows", poses.len(), sizes.len())));
        }
        for (p, s) in poses.iter().zip(&sizes) {
            if p.is_empty() || s.is_empty() {
                return Err(Error::Empty("hypothesis row".into()));
            }
            if p.iter().any(|pose| (pose.rotation.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() > 1e-9) {
                return Err(Error::InvalidArgument("hypothesis quaternion is not unit".into()));
            }
            if s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument("hypothesis sizes must be positive".into()));
            }
        }
        Ok(Self { poses, sizes })
    }

    pub fn objects(&self) -> usize {
        self.poses.len()
    }

    /// Concatenates the per-object sets of `parts`, in order.
    pub fn stack(parts: Vec<HypothesisSet>) -> Result<Self> {
        let mut poses = Vec::new();
        let mut sizes = Vec::new();
        for p in parts {
            poses.extend(p.poses);
            sizes.extend(p.sizes);
        }
        Self::new(poses, sizes)
    }
}

/// Where the object sits before normalization: hypotheses are decoded in a
/// frame centred at `center` and divided by `radius`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub center: Vec3,
    pub radius: f64,
}

/// Per-group pose decoder. Each stage's group map is projected, max-pooled
/// over points per group element, and the stages are max-pooled together.
#[derive(Clone, Debug)]
pub struct PoseHead {
    pub stages: Vec<Linear>,
    pub mlp: Mlp,
    pub hidden: usize,
}

/// Pooled per-group features `|G| x h` and local outputs `|G| x 7`
/// (quaternion offset, translation offset).
pub struct PoseDecode {
    pub feats: Var,
    pub raw: Var,
}

impl PoseHead {
    pub fn new(b: &mut Builder, name: &str, group_width: usize, hidden: usize, stages: usize) -> Self {
        let mut s = b.sub(name);
        let projections = (0..stages).map(|l| Linear::new(&mut s, &format!("stage{l}"), group_width, hidden)).collect();
        let mut m = s.sub("mlp");
        let mlp = Mlp { first: Linear::new(&mut m, "0", hidden, hidden), second: Linear::zero(&mut m, "1", hidden, 7), act: Activation::Relu };
        Self { stages: projections, mlp, hidden }
    }

    /// `maps[l]` is `(counts[l]·n_g) x group_width`.
    pub fn forward(&self, g: &Graph, maps: &[Var], counts: &[usize], n_g: usize) -> Result<PoseDecode> {
        if maps.len() != self.stages.len() || counts.len() != maps.len() {
            return Err(Error::InvalidArgument(format!("pose head needs {} stage maps, got {}", self.stages.len(), maps.len())));
        }
        let h = self.hidden;
        let mut pooled = Vec::with_capacity(maps.len());
        for ((proj, &map), &n) in self.stages.iter().zip(maps).zip(counts) {
            if g.shape(map).0 != n * n_g {
                return Err(Error::Shape(format!("group map has {} rows, expected {}", g.shape(map).0, n * n_g)));
            }
            let y = g.relu(proj.forward(g, map));
            pooled.push(g.max_rows(g.reshape(y, n, n_g * h)));
        }
        let feats = g.reshape(g.max_rows(g.concat_rows(&pooled)), n_g, h);
        let raw = self.mlp.forward(g, feats);
        Ok(PoseDecode { feats, raw })
    }
}

/// Per-group size decoder on the last stage features, the conditioned
/// latent and the pose features.
#[derive(Clone, Debug)]
pub struct SizeHead {
    pub condition: Linear,
    pub layers: [Linear; 3],
    pub pose_proj: Linear,
    pub out: Mlp,
    pub width: usize,
}

impl SizeHead {
    /// `log_bias` is the initial log size in the normalized frame.
    pub fn new(b: &mut Builder, name: &str, width: usize, latent: usize, hidden: usize, log_bias: f64) -> Self {
        let mut s = b.sub(name);
        let condition = Linear::zero(&mut s, "condition", latent, width);
        let layers = [
            Linear::new(&mut s, "0", 2 * width, width),
            Linear::new(&mut s, "1", width, width),
            Linear::new(&mut s, "2", width, width),
        ];
        let pose_proj = Linear::new(&mut s, "pose", hidden, width);
        let mut m = s.sub("out");
        let first = Linear::new(&mut m, "0", width, width);
        let mut last = m.sub("1");
        let second = Linear { weight: last.zeros("w", width, 1), bias: Some(last.param("b", Tensor::scalar(log_bias))), fan_in: width, fan_out: 1 };
        Self { condition, layers, pose_proj, out: Mlp { first, second, act: Activation::Relu }, width }
    }

    /// Log sizes `|G| x 1`. Without a latent the conditioning input is zero.
    pub fn forward(&self, g: &Graph, f4: Var, latent: Option<Var>, pose_feats: Var) -> Result<Var> {
        let (n, d) = g.shape(f4);
        if d != self.width {
            return Err(Error::Shape(format!("size head expects width {}, got {d}", self.width)));
        }
        let cond = match latent {
            Some(f) => {
                if g.shape(f) != (1, self.condition.fan_in) {
                    return Err(Error::Shape(format!("latent of shape {:?}, expected 1 x {}", g.shape(f), self.condition.fan_in)));
                }
                g.broadcast_rows(self.condition.forward(g, f), n)
            }
            None => g.constant(Tensor::zeros(n, d)),
        };
        let mut x = g.concat_cols(&[f4, cond]);
        for layer in &self.layers {
            x = g.relu(layer.forward(g, x));
        }
        let base = g.max_rows(x);
        let per_group = g.relu(g.add_row(self.pose_proj.forward(g, pose_feats), base));
        Ok(self.out.forward(g, per_group))
    }
}

/// Rotation of hypothesis `e` in the local frame: `G_e ⊗ normalize(1 + Δq)`.
pub fn hypothesis_rotation(group: &RotationGroup, e: usize, dq: &[f64]) -> Quat {
    let local = quat_normalize([1.0 + dq[0], dq[1], dq[2], dq[3]]);
    quat_canonical(quat_normalize(quat_mul(group.quaternion(e), local)))
}

/// Composes raw decoder outputs (`|G| x 7` pose, `|G| x 1` log size) into
/// world-frame hypotheses for one object.
pub fn compose_hypotheses(raw_pose: &Tensor, log_size: &Tensor, group: &RotationGroup, frame: &Frame) -> Result<(Vec<Pose>, Vec<f64>)> {
    let n_g = group.len();
    if raw_pose.shape() != (n_g, 7) || log_size.shape() != (n_g, 1) {
        return Err(Error::Shape(format!("raw hypotheses {:?} / {:?} for a group of {n_g}", raw_pose.shape(), log_size.shape())));
    }
    if !raw_pose.is_finite() || !log_size.is_finite() {
        return Err(Error::NonFinite("hypothesis decoder output".into()));
    }
    let mut poses = Vec::with_capacity(n_g);
    let mut sizes = Vec::with_capacity(n_g);
    for e in 0..n_g {
        let row = raw_pose.row(e);
        let q = hypothesis_rotation(group, e, &row[..4]);
        let dt = mat_vec(group.element(e), &[row[4], row[5], row[6]]);
        let t = [0, 1, 2].map(|k| frame.center[k] + frame.radius * dt[k]);
        poses.push(Pose::new(q, t)?);
        sizes.push(frame.radius * log_size.get(e, 0).exp());
    }
    Ok((poses, sizes))
}

/// Differentiable placement of `shape` under hypothesis `e` in the
/// normalized frame: `exp(o_e) · R_e · x + G_e · δt_e`.
pub fn posed_in_frame(g: &Graph, shape: &Tensor, raw_pose: Var, log_size: Var, group: &RotationGroup, e: usize) -> Var {
    let n = shape.rows();
    let row = g.gather_rows(raw_pose, &[e]);
    let q = g.add_row(g.slice_cols(row, 0, 4), g.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0, 0.0]]).unwrap()));
    let local = g.quat_to_mat(q);
    let ge = crate::geometry::pose::mat_to_tensor(group.element(e));
    let ge_t = g.constant(ge.transpose());
    let x = g.constant(shape.clone());
    let rotated = g.matmul(g.matmul_t(x, false, local, true), ge_t);
    let s = g.exp(g.gather_rows(log_size, &[e]));
    let scaled = g.mul_col(rotated, g.broadcast_rows(s, n));
    let dt = g.matmul(g.slice_cols(row, 4, 3), ge_t);
    g.add_row(scaled, dt)
}
