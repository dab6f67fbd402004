//! Two-phase training: prior-conditioned pretraining, then refinement of
//! the control branch with the base frozen.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::diffusion::loss::{loss_pretrain, loss_refine};
use crate::error::{Error, Result};
use crate::eval::synth::{Dataset, Instance, Split};
use crate::eval::Symmetry;
use crate::geometry::chamfer::nearest_sq;
use crate::geometry::cloud::normalize;
use crate::geometry::pose::{apply_pose, dot, mat_to_tensor, mat_vec, Pose, Scale};
use crate::heads::hypotheses::{compose_hypotheses, posed_in_frame};
use crate::geometry::group::RotationGroup;
use crate::heads::Frame;
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::model::{compute_condition_latent, normalized_frame, Conditioning, Model};

/// One training instance.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// Ground-truth canonical shape, the diffusion target.
    pub canonical: Tensor,
    pub observed: Tensor,
    pub cond: Conditioning,
    pub pose: Pose,
    pub scale: f64,
    pub symmetry: Option<Symmetry>,
}

impl Sample {
    pub fn from_instance(inst: &Instance, prior: &Tensor) -> Result<Self> {
        Ok(Self {
            id: inst.id.clone(),
            canonical: inst.canonical.clone(),
            observed: inst.observed.clone(),
            cond: Conditioning::new(prior, None)?,
            pose: inst.pose,
            scale: inst.scale,
            symmetry: inst.category.symmetry(),
        })
    }
}

pub fn samples(data: &Dataset, split: Split) -> Result<Vec<Sample>> {
    data.split(split).map(|inst| Sample::from_instance(inst, data.prior(inst.category)?)).collect()
}

/// Initial log size in the normalized frame: the mean of `log(scale / ρ)`.
pub fn log_size_bias(samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let (_, frame) = normalized_frame(&s.observed)?;
        total += (s.scale / frame.radius).ln();
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Noise loss per step, averaged over the batch.
    pub noise_loss: Vec<f64>,
    /// Pose/size loss per step, averaged over the batch.
    pub pose_loss: Vec<f64>,
    pub wall_ms: u64,
}

impl TrainReport {
    /// Mean noise loss over steps `[from, to)`.
    pub fn mean_noise_loss(&self, from: usize, to: usize) -> f64 {
        let w = &self.noise_loss[from.min(self.noise_loss.len())..to.min(self.noise_loss.len())];
        w.iter().sum::<f64>() / w.len().max(1) as f64
    }
}

/// The ground truth placed in the observation's normalized frame.
fn normalized_target(sample: &Sample, frame: &Frame) -> Result<Tensor> {
    let world = apply_pose(&sample.canonical, &sample.pose, &Scale::uniform(sample.scale)?)?;
    Ok(normalize(&world, &frame.center, frame.radius))
}

/// Mean bidirectional squared closest-point distance between a graph cloud and a fixed one.
fn chamfer_mean_var(g: &Graph, moving: Var, target: &Tensor) -> Var {
    let current = g.value(moving).clone();
    let fwd: Vec<usize> = nearest_sq(&current, target).iter().map(|p| p.0).collect();
    let back: Vec<usize> = nearest_sq(target, &current).iter().map(|p| p.0).collect();
    let t = g.constant(target.clone());
    let d1 = g.sub(moving, g.gather_rows(t, &fwd));
    let d2 = g.sub(g.gather_rows(moving, &back), t);
    let a = g.scale(g.sum_all(g.square(d1)), 1.0 / current.rows() as f64);
    let b = g.scale(g.sum_all(g.square(d2)), 1.0 / target.rows() as f64);
    g.add(a, b)
}

fn chamfer_mean(a: &Tensor, b: &Tensor) -> f64 {
    let ab: f64 = nearest_sq(a, b).iter().map(|p| p.1).sum::<f64>() / a.rows() as f64;
    let ba: f64 = nearest_sq(b, a).iter().map(|p| p.1).sum::<f64>() / b.rows() as f64;
    ab + ba
}

/// Translation errors are small numbers in the normalized frame next to
/// rotation errors, so they are weighted up.
const TRANSLATION_WEIGHT: f64 = 10.0;

/// Sum over hypotheses of the squared distance between the local rotation
/// and the one that would make the hypothesis exact. Under a symmetry only
/// the placed axis is compared, against the nearer end when it may flip.
fn rotation_regression(g: &Graph, raw_pose: Var, group: &RotationGroup, truth: &Pose, symmetry: Option<Symmetry>) -> Var {
    let r = truth.matrix();
    let one = g.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0, 0.0]]).unwrap());
    let mut total = g.constant(Tensor::zeros(1, 1));
    for e in 0..group.len() {
        let local = g.quat_to_mat(g.add_row(g.slice_cols(g.gather_rows(raw_pose, &[e]), 0, 4), one));
        let ge = group.element(e);
        let target: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| ge[k][i] * r[k][j]).sum()));
        let term = match symmetry {
            None => g.sub(local, g.constant(mat_to_tensor(&target))),
            Some(sym) => {
                let placed = g.matmul(local, g.constant(Tensor::from_vec(3, 1, sym.axis.to_vec()).unwrap()));
                let mut want = mat_vec(&target, &sym.axis);
                let now = g.value(placed).data().to_vec();
                if sym.flip && dot(&want, &[now[0], now[1], now[2]]) < 0.0 {
                    want = want.map(|v| -v);
                }
                g.sub(placed, g.constant(Tensor::from_vec(3, 1, want.to_vec()).unwrap()))
            }
        };
        total = g.add(total, g.sum_all(g.square(term)));
    }
    total
}

/// Winner-takes-all hypothesis loss: the hypothesis (with its own size)
/// closest to the ground truth in the normalized frame is pulled onto it.
/// Every hypothesis also regresses the true rotation, translation and log size.
pub fn pose_loss(model: &Model, g: &Graph, sample: &Sample, cond: &Conditioning) -> Result<Var> {
    let out = model.decode_hypotheses(g, &sample.observed, cond)?;
    let target = normalized_target(sample, &out.frame)?;
    let unit = Frame { center: [0.0; 3], radius: 1.0 };
    let (poses, sizes) = compose_hypotheses(&g.value(out.raw_pose), &g.value(out.log_size), &model.group, &unit)?;
    let mut best = (f64::INFINITY, 0);
    for (e, (p, s)) in poses.iter().zip(&sizes).enumerate() {
        let d = chamfer_mean(&apply_pose(&sample.canonical, p, &Scale::uniform(*s)?)?, &target);
        if d < best.0 {
            best = (d, e);
        }
    }
    let posed = posed_in_frame(g, &sample.canonical, out.raw_pose, out.log_size, &model.group, best.1);
    let n_g = model.group.len();
    let t = [0, 1, 2].map(|k| (sample.pose.translation[k] - out.frame.center[k]) / out.frame.radius);
    let local = Tensor::from_fn(n_g, 3, |e, k| (0..3).map(|j| model.group.element(e)[j][k] * t[j]).sum());
    let dt = g.sub(g.slice_cols(out.raw_pose, 4, 3), g.constant(local));
    let ds = g.sub(out.log_size, g.constant(Tensor::full(n_g, 1, (sample.scale / out.frame.radius).ln())));
    let rot = rotation_regression(g, out.raw_pose, &model.group, &sample.pose, sample.symmetry);
    let regress = g.scale(g.add(rot, g.add(g.scale(g.sum_all(g.square(dt)), TRANSLATION_WEIGHT), g.sum_all(g.square(ds)))), 1.0 / n_g as f64);
    Ok(g.add(chamfer_mean_var(g, posed, &target), regress))
}

/// Receives training progress; checkpoints are written by the caller.
pub trait TrainObserver {
    fn log(&mut self, _entry: &LogEntry) -> Result<()> {
        Ok(())
    }
    fn checkpoint(&mut self, _model: &Model, _step: usize) -> Result<()> {
        Ok(())
    }
}

/// Observer that drops everything.
pub struct Silent;
impl TrainObserver for Silent {}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    Pretrain,
    Refine,
}

/// Prior-conditioned pretraining of the denoiser and the hypothesis heads.
pub fn pretrain(model: &mut Model, data: &[Sample], cfg: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<TrainReport> {
    if model.is_refining() {
        return Err(Error::InvalidArgument("pretraining needs a model without the control branch".into()));
    }
    run(model, data, cfg, cfg.pretrain_steps, Phase::Pretrain, observer)
}

/// Locks the base, attaches the trainable copy and trains it on the
/// observation-conditioned objective.
pub fn refine(model: &mut Model, data: &[Sample], cfg: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<TrainReport> {
    if !model.is_refining() {
        model.attach_control()?;
    }
    let mut conditioned = data.to_vec();
    for s in &mut conditioned {
        let f = compute_condition_latent(&s.observed, &s.cond.prior, model)?;
        s.cond.latent = Some(f);
    }
    run(model, &conditioned, cfg, cfg.refine_steps, Phase::Refine, observer)
}

fn run(model: &mut Model, data: &[Sample], cfg: &TrainConfig, steps: usize, phase: Phase, observer: &mut dyn TrainObserver) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let sched = model.schedule.clone();
    let phase_id = if phase == Phase::Pretrain { 1 } else { 2 };
    let mut order_rng = rng::stream(cfg.seed, 10 * phase_id);
    let mut noise_rng = rng::stream(cfg.seed, 10 * phase_id + 1);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, clip_norm: cfg.clip_norm, ..AdamConfig::default() });
    let mut report = TrainReport::default();
    let start = Instant::now();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 0..steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch.min(data.len()) {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let x0s: Vec<Tensor> = batch.iter().map(|s| s.canonical.clone()).collect();
        let m: &Model = model;
        let eps_fn = |g: &Graph<'_>, i: usize, xt: Var, t: usize| -> Result<Var> {
            let x = g.value(xt).clone();
            m.predict_noise(g, &x, t, &batch[i].cond)
        };
        let out = match phase {
            Phase::Pretrain => loss_pretrain(&m.store, &x0s, &sched, &mut noise_rng, cfg.loss_norm, eps_fn)?,
            Phase::Refine => loss_refine(&m.store, &x0s, &sched, &mut noise_rng, cfg.loss_norm, eps_fn)?,
        };
        let mut grads = out.grads;
        let mut pose_total = 0.0;
        if cfg.pose_weight > 0.0 {
            for s in &batch {
                let g = Graph::new(&m.store);
                let l = pose_loss(m, &g, s, &s.cond)?;
                let v = g.value(l).get(0, 0);
                if !v.is_finite() {
                    return Err(Error::Diverged { step, loss: v });
                }
                pose_total += v;
                g.backward(l).accumulate_into(&mut grads, cfg.pose_weight);
            }
        }
        let noise = out.loss / batch.len() as f64;
        let pose = pose_total / batch.len() as f64;
        let total = noise + cfg.pose_weight * pose;
        if !total.is_finite() {
            return Err(Error::Diverged { step, loss: total });
        }
        let lr = cfg.lr_at(step, data.len());
        adam.step(&mut model.store, &grads, lr);
        report.noise_loss.push(noise);
        report.pose_loss.push(pose);
        if step % cfg.log_every == 0 || step + 1 == steps {
            observer.log(&LogEntry { step, loss: total, lr, wall_ms: start.elapsed().as_millis() as u64 })?;
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 != steps {
            observer.checkpoint(model, step + 1)?;
        }
    }
    observer.checkpoint(model, steps)?;
    report.wall_ms = start.elapsed().as_millis() as u64;
    Ok(report)
}
