//! The assembled network: prior-conditioned denoiser, its trainable control
//! copy, and the pose/size hypothesis network.

use nalgebra::{Matrix3, SymmetricEigen};

use crate::autograd::{Graph, ParamStore, Var};
use crate::diffusion::{DiffusionSchedule, TimeEmbedding};
use crate::error::{Error, Result};
use crate::geometry::cloud::{centroid, farthest_point_sample, normalize, rms_radius};
use crate::geometry::group::{GroupKind, RotationGroup};
use crate::heads::{compose_hypotheses, Frame, HypothesisSet, PoseHead, SizeHead};
use crate::layers::nn::{Activation, Builder, Linear, Mlp};
use crate::rng;
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::encoder::{Decoder, Level, Pyramid, STAGES};

pub const INVARIANT_FEATURES: usize = 4;

/// What a denoising pass is conditioned on. `prior` is reordered by
/// farthest point sampling so every prefix is an even subsample; `anchor`
/// keeps the original order, row `i` matching moving point `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub prior: Tensor,
    pub anchor: Tensor,
    pub latent: Option<Tensor>,
}

impl Conditioning {
    pub fn new(prior: &Tensor, latent: Option<Tensor>) -> Result<Self> {
        if prior.rows() == 0 || prior.cols() != 3 {
            return Err(Error::Shape(format!("prior must be N x 3 and non-empty, got {:?}", prior.shape())));
        }
        let order = farthest_point_sample(prior, prior.rows())?;
        Ok(Self { prior: prior.select_rows(&order), anchor: prior.clone(), latent })
    }

    /// Same prior and anchor with a different conditioning latent.
    pub fn with_latent(&self, latent: Option<Tensor>) -> Self {
        Self { latent, ..self.clone() }
    }
}

/// Centre, RMS radius and the normalized cloud.
pub fn normalized_frame(points: &Tensor) -> Result<(Tensor, Frame)> {
    if points.rows() == 0 {
        return Err(Error::Empty("point cloud".into()));
    }
    let center = centroid(points);
    let radius = rms_radius(points, &center);
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidArgument(format!("degenerate cloud with RMS radius {radius}")));
    }
    Ok((normalize(points, &center, radius), Frame { center, radius }))
}

/// Per-point `[‖x‖, |u_1·x|, |u_2·x|, |u_3·x|]` in the normalized frame,
/// with `u_k` the principal axes by decreasing variance.
pub fn invariant_features(points: &Tensor) -> Result<(Tensor, Frame)> {
    let (x, frame) = normalized_frame(points)?;
    let mut cov = Matrix3::<f64>::zeros();
    for i in 0..x.rows() {
        let p = x.point(i);
        for a in 0..3 {
            for b in 0..3 {
                cov[(a, b)] += p[a] * p[b] / x.rows() as f64;
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<[f64; 3]> = order.iter().map(|&k| [eig.eigenvectors[(0, k)], eig.eigenvectors[(1, k)], eig.eigenvectors[(2, k)]]).collect();
    let feats = Tensor::from_fn(x.rows(), INVARIANT_FEATURES, |i, c| {
        let p = x.point(i);
        match c {
            0 => (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt(),
            k => (axes[k - 1][0] * p[0] + axes[k - 1][1] * p[1] + axes[k - 1][2] * p[2]).abs(),
        }
    });
    Ok((feats, frame))
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub stem: Linear,
    pub prior_stem: Linear,
    pub time: TimeEmbedding,
    pub encoder: Pyramid,
    pub decoder: Decoder,
    pub head: Mlp,
}

/// Trainable encoder copy with its zero-initialized input and output maps.
#[derive(Clone, Debug)]
pub struct Control {
    pub latent_in: Linear,
    pub encoder: Pyramid,
    pub outputs: Vec<Linear>,
}

#[derive(Clone, Debug)]
pub struct PoseNet {
    pub stem: Linear,
    pub encoder: Pyramid,
    pub pose: PoseHead,
    pub size: SizeHead,
}

/// Differentiable hypothesis outputs for one object.
pub struct PoseOutput {
    pub raw_pose: Var,
    pub log_size: Var,
    pub frame: Frame,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub denoiser: Denoiser,
    pub posenet: PoseNet,
    pub control: Option<Control>,
    pub group: RotationGroup,
    pub schedule: DiffusionSchedule,
    trivial: RotationGroup,
}

impl Model {
    /// `log_size_bias` initializes the size head to `exp(bias)` in the normalized frame.
    pub fn new(config: &ModelConfig, seed: u64, log_size_bias: f64) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let block = config.block();
        let group = RotationGroup::new(config.group);
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, 0);
        let mut b = Builder::new(&mut store, &mut r);
        let denoiser = {
            let mut s = b.sub("denoiser");
            Denoiser {
                stem: Linear::new(&mut s, "stem", 6, d),
                prior_stem: Linear::new(&mut s, "prior_stem", 3, d),
                time: TimeEmbedding::new(&mut s, "time", config.time_width, d)?,
                encoder: Pyramid::new(&mut s, "encoder", &block, None)?,
                decoder: Decoder::new(&mut s, "decoder", &block)?,
                head: Mlp::new(&mut s, "head", [d, d, 3], Activation::Silu),
            }
        };
        let posenet = {
            let mut s = b.sub("posenet");
            PoseNet {
                stem: Linear::new(&mut s, "stem", INVARIANT_FEATURES, d),
                encoder: Pyramid::new(&mut s, "encoder", &block, Some(&group))?,
                pose: PoseHead::new(&mut s, "pose", config.group_width, config.pose_hidden, STAGES),
                size: SizeHead::new(&mut s, "size", d, 2 * d, config.pose_hidden, log_size_bias),
            }
        };
        let schedule = DiffusionSchedule::new(config.schedule)?;
        Ok(Self { config: config.clone(), store, denoiser, posenet, control: None, group, schedule, trivial: RotationGroup::new(GroupKind::Trivial) })
    }

    pub fn is_refining(&self) -> bool {
        self.control.is_some()
    }

    /// Adds the trainable copy of the denoiser's encoder, initialized from
    /// the base weights, with zero maps in and out, and freezes everything
    /// else except the size head's conditioning map.
    pub fn attach_control(&mut self) -> Result<()> {
        if self.control.is_some() {
            return Err(Error::InvalidArgument("control branch already attached".into()));
        }
        let d = self.config.width;
        let block = self.config.block();
        let before = self.store.len();
        let mut r = rng::stream(0, 1);
        let mut b = Builder::new(&mut self.store, &mut r);
        let mut s = b.sub("control");
        let latent_in = Linear::zero(&mut s, "latent_in", 2 * d, d);
        let encoder = Pyramid::new(&mut s, "encoder", &block, None)?;
        let outputs = (0..STAGES).map(|l| Linear::zero(&mut s, &format!("out{l}"), d, d)).collect();
        let new_ids: Vec<_> = self.store.ids().skip(before).collect();
        for id in new_ids {
            let name = self.store.name(id).to_string();
            if let Some(rest) = name.strip_prefix("control.encoder.") {
                let src = self.store.find(&format!("denoiser.encoder.{rest}")).ok_or_else(|| Error::Shape(format!("no base tensor for {name}")))?;
                if self.store.get(src).shape() != self.store.get(id).shape() {
                    return Err(Error::Shape(format!("base/copy shape mismatch for {name}")));
                }
                let value = self.store.get(src).clone();
                *self.store.get_mut(id) = value;
            }
        }
        self.control = Some(Control { latent_in, encoder, outputs });
        self.apply_refine_freeze();
        Ok(())
    }

    /// Freezes all parameters except the control branch and the size conditioning map.
    pub fn apply_refine_freeze(&mut self) {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = self.store.name(id);
            let trainable = name.starts_with("control.") || name.starts_with("posenet.size.condition.");
            self.store.set_frozen(id, !trainable);
        }
    }

    /// Noise prediction for the moving cloud `xt` at step `t`. Each point
    /// also sees its offset from the matching anchor point at that noise level.
    pub fn predict_noise(&self, g: &Graph, xt: &Tensor, t: usize, cond: &Conditioning) -> Result<Var> {
        let d = &self.denoiser;
        let n = xt.rows();
        if xt.cols() != 3 || n < 16 {
            return Err(Error::Shape(format!("denoiser needs at least 16 x 3 points, got {:?}", xt.shape())));
        }
        if cond.anchor.rows() != n {
            return Err(Error::Shape(format!("{n} moving points but {} anchor points", cond.anchor.rows())));
        }
        self.schedule.check_step(t)?;
        let temb = d.time.forward(g, t)?;
        let root = self.schedule.alpha_bar(t).sqrt();
        let input = Tensor::from_fn(n, 6, |i, c| if c < 3 { xt.get(i, c) } else { xt.get(i, c - 3) - root * cond.anchor.get(i, c - 3) });
        let h0 = g.silu(g.add_row(d.stem.forward(g, g.constant(input)), temb));
        let p0 = g.silu(d.prior_stem.forward(g, g.constant(cond.prior.clone())));
        let base = d.encoder.forward(g, xt, h0, &cond.prior, p0, &self.trivial, None)?;
        let mut skips = vec![h0];
        skips.extend(base.feats.iter().copied());
        if let (Some(ctrl), Some(f)) = (&self.control, &cond.latent) {
            let f = g.constant(f.clone());
            if g.shape(f) != (1, ctrl.latent_in.fan_in) {
                return Err(Error::Shape(format!("latent of shape {:?}", g.shape(f))));
            }
            let input = g.add(h0, g.broadcast_rows(ctrl.latent_in.forward(g, f), n));
            let copy = ctrl.encoder.forward(g, xt, input, &cond.prior, p0, &self.trivial, Some(&base.levels))?;
            for (l, out) in ctrl.outputs.iter().enumerate() {
                skips[l + 1] = g.add(skips[l + 1], out.forward(g, copy.feats[l]));
            }
        }
        let points: Vec<&Tensor> = std::iter::once(xt).chain(base.levels.iter().map(|l| &l.points)).collect();
        let radii = level_radii(&base.levels);
        let y = d.decoder.forward(g, &skips, &points, &radii)?;
        Ok(d.head.forward(g, y))
    }

    /// Raw pose and log-size hypotheses for one observed cloud. The size
    /// conditioning input is only used once the control branch is attached.
    pub fn decode_hypotheses(&self, g: &Graph, observed: &Tensor, cond: &Conditioning) -> Result<PoseOutput> {
        let p = &self.posenet;
        let (obs_f, frame) = invariant_features(observed)?;
        let (pri_f, _) = invariant_features(&cond.prior)?;
        let obs = normalize(observed, &frame.center, frame.radius);
        let h = g.silu(p.stem.forward(g, g.constant(obs_f)));
        let hp = g.silu(p.stem.forward(g, g.constant(pri_f)));
        let out = p.encoder.forward(g, &obs, h, &cond.prior, hp, &self.group, None)?;
        let counts: Vec<usize> = out.levels.iter().map(|l| l.keep.len()).collect();
        let dec = p.pose.forward(g, &out.group_maps, &counts, self.group.len())?;
        let latent = match (&self.control, &cond.latent) {
            (Some(_), Some(f)) => Some(g.constant(f.clone())),
            _ => None,
        };
        let log_size = p.size.forward(g, out.feats[STAGES - 1], latent, dec.feats)?;
        Ok(PoseOutput { raw_pose: dec.raw, log_size, frame })
    }

    /// World-frame hypothesis set for one object.
    pub fn hypotheses(&self, observed: &Tensor, cond: &Conditioning) -> Result<HypothesisSet> {
        let g = Graph::new(&self.store);
        let out = self.decode_hypotheses(&g, observed, cond)?;
        let (poses, sizes) = compose_hypotheses(&g.value(out.raw_pose), &g.value(out.log_size), &self.group, &out.frame)?;
        HypothesisSet::new(vec![poses], vec![sizes])
    }
}

fn level_radii(levels: &[Level]) -> Vec<f64> {
    std::iter::once(levels[0].radius / 2.0).chain(levels.iter().map(|l| l.radius)).collect()
}

/// `f = [max-pool stem(P_0); max-pool stem(P_r)]`, width `2d`, from the
/// invariant stem of the pose network.
pub fn compute_condition_latent(observed: &Tensor, prior: &Tensor, model: &Model) -> Result<Tensor> {
    let g = Graph::new(&model.store);
    let pool = |cloud: &Tensor| -> Result<Var> {
        let (f, _) = invariant_features(cloud)?;
        Ok(g.max_rows(g.silu(model.posenet.stem.forward(&g, g.constant(f)))))
    };
    let f = g.concat_cols(&[pool(observed)?, pool(prior)?]);
    let value = g.value(f).clone();
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose::{axis_angle, quat_to_matrix, rotate_points};

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig { width: 8, heads: 2, group_width: 4, pose_hidden: 8, kernel_size: 6, k_seed: 2, max_neighbors: 8, time_width: 8, ..ModelConfig::default() }
    }

    fn clouds(seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut r = rng::seeded(seed);
        let x = rng::normal_tensor(&mut r, 32, 3);
        let prior = rng::uniform_tensor(&mut r, 32, 3, -0.5, 0.5);
        let obs = rng::uniform_tensor(&mut r, 32, 3, -0.3, 0.3);
        (x, prior, obs)
    }

    #[test]
    fn invariant_features_ignore_rigid_motion_and_scale() {
        let (_, _, obs) = clouds(1);
        let (a, _) = invariant_features(&obs).unwrap();
        let r = quat_to_matrix(axis_angle([0.3, 1.0, -0.2], 2.0)).unwrap();
        let moved = rotate_points(&obs, &r).map(|v| 3.0 * v + 0.5);
        let (b, frame) = invariant_features(&moved).unwrap();
        assert!(a.zip_map(&b, |x, y| (x - y).abs()).max_abs() < 1e-9);
        assert!((frame.radius - 3.0 * rms_radius(&obs, &centroid(&obs))).abs() < 1e-12);
    }

    #[test]
    fn swapping_the_latent_keeps_prior_order_and_anchor() {
        let (_, prior, _) = clouds(4);
        let plain = Conditioning::new(&prior, None).unwrap();
        let with = plain.with_latent(Some(Tensor::zeros(1, 16)));
        assert_eq!(with.prior, plain.prior);
        assert_eq!(with.anchor, prior);
        assert!(with.latent.is_some());
    }

    #[test]
    fn denoiser_output_shape_and_determinism() {
        let model = Model::new(&small_config(), 3, 0.0).unwrap();
        let (x, prior, _) = clouds(2);
        let cond = Conditioning::new(&prior, None).unwrap();
        let run = || {
            let g = Graph::new(&model.store);
            let v = model.predict_noise(&g, &x, 5, &cond).unwrap();
            let out = g.value(v).clone();
            out
        };
        let a = run();
        assert_eq!(a.shape(), (32, 3));
        assert_eq!(a, run());
    }

    #[test]
    fn zeroed_decoder_predicts_zero_noise() {
        let mut model = Model::new(&small_config(), 3, 0.0).unwrap();
        for id in model.store.ids().collect::<Vec<_>>() {
            if model.store.name(id).starts_with("denoiser.decoder.") || model.store.name(id).starts_with("denoiser.head.") {
                let (r, c) = model.store.get(id).shape();
                *model.store.get_mut(id) = Tensor::zeros(r, c);
            }
        }
        let (x, prior, _) = clouds(4);
        let g = Graph::new(&model.store);
        let v = model.predict_noise(&g, &x, 3, &Conditioning::new(&prior, None).unwrap()).unwrap();
        assert_eq!(g.value(v).max_abs(), 0.0);
    }

    #[test]
    fn attached_control_starts_as_a_no_op() {
        let mut model = Model::new(&small_config(), 5, 0.0).unwrap();
        let (x, prior, obs) = clouds(6);
        let plain = Conditioning::new(&prior, None).unwrap();
        let before = {
            let g = Graph::new(&model.store);
            let v = model.predict_noise(&g, &x, 7, &plain).unwrap();
            let out = g.value(v).clone();
            out
        };
        let hyps_before = model.hypotheses(&obs, &plain).unwrap();
        model.attach_control().unwrap();
        let f = compute_condition_latent(&obs, &prior, &model).unwrap();
        assert_eq!(f.shape(), (1, 16));
        let cond = Conditioning::new(&prior, Some(f)).unwrap();
        let g = Graph::new(&model.store);
        let v = model.predict_noise(&g, &x, 7, &cond).unwrap();
        assert_eq!(*g.value(v), before);
        assert_eq!(model.hypotheses(&obs, &cond).unwrap(), hyps_before);
        let trainable: Vec<&str> = model.store.ids().filter(|&id| !model.store.is_frozen(id)).map(|id| model.store.name(id)).collect();
        assert!(trainable.iter().all(|n| n.starts_with("control.") || n.starts_with("posenet.size.condition.")));
        let copy = model.store.find("control.encoder.2.attn.q.w").or_else(|| model.store.ids().map(|id| model.store.name(id)).find(|n| n.starts_with("control.encoder.2.")).and_then(|n| model.store.find(n)));
        let copy = copy.unwrap();
        let base = model.store.find(&model.store.name(copy).replacen("control.", "denoiser.", 1)).unwrap();
        assert_eq!(model.store.get(copy), model.store.get(base));
        assert!(model.attach_control().is_err());
    }

    #[test]
    fn condition_latent_halves_match_for_equal_clouds() {
        let model = Model::new(&small_config(), 5, 0.0).unwrap();
        let (_, prior, _) = clouds(8);
        let f = compute_condition_latent(&prior, &prior, &model).unwrap();
        assert_eq!(&f.data()[..8], &f.data()[8..]);
        let mut order: Vec<usize> = (0..32).collect();
        order.reverse();
        let g = compute_condition_latent(&prior.select_rows(&order), &prior, &model).unwrap();
        assert!(f.zip_map(&g, |a, b| (a - b).abs()).max_abs() < 1e-12);
        assert!(compute_condition_latent(&Tensor::zeros(0, 3), &prior, &model).is_err());
    }

    #[test]
    fn pyramid_halves_the_resolution() {
        let model = Model::new(&small_config(), 9, 0.0).unwrap();
        let mut r = rng::seeded(10);
        let x = rng::normal_tensor(&mut r, 256, 3);
        let prior = rng::uniform_tensor(&mut r, 256, 3, -0.5, 0.5);
        let cond = Conditioning::new(&prior, None).unwrap();
        let g = Graph::new(&model.store);
        let h0 = g.constant(rng::normal_tensor(&mut r, 256, 8));
        let p0 = g.constant(rng::normal_tensor(&mut r, 256, 8));
        let out = model.denoiser.encoder.forward(&g, &x, h0, &cond.prior, p0, &model.trivial, None).unwrap();
        let counts: Vec<usize> = out.levels.iter().map(|l| l.points.rows()).collect();
        assert_eq!(counts, vec![128, 64, 32, 16]);
        for l in 1..4 {
            assert_eq!(out.levels[l].radius, 2.0 * out.levels[l - 1].radius);
        }
    }
}
