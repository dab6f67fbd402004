//! Shape sampling, hypothesis selection and evaluation over a split.

use crate::autograd::Graph;
use crate::diffusion::sample_shape;
use crate::error::{Error, Result};
use crate::eval::{iou3d, EvalRecord, Instance, OrientedBox};
use crate::geometry::chamfer::cd_metric;
use crate::geometry::cloud::bbox_extents;
use crate::geometry::pose::{Pose, Vec3};
use crate::heads::{select_best, HypothesisSet, Selection};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

use super::model::{compute_condition_latent, Conditioning, Model};

#[derive(Clone, Debug)]
pub struct Inference {
    /// Reconstructed canonical shape.
    pub shape: Tensor,
    pub hypotheses: HypothesisSet,
    pub selection: Selection,
}

/// Samples a canonical shape for the observation, decodes the pose and size
/// hypotheses and keeps the pair that best explains the observation.
pub fn infer(model: &Model, observed: &Tensor, prior: &Tensor, rng: &mut Rng) -> Result<Inference> {
    let latent = match model.is_refining() {
        true => Some(compute_condition_latent(observed, prior, model)?),
        false => None,
    };
    let cond = Conditioning::new(prior, latent)?;
    let shape = sample_shape(&cond.anchor, cond.anchor.rows(), &model.schedule, rng, |state| {
        let g = Graph::new(&model.store);
        let eps = model.predict_noise(&g, &state.moving, state.t, &cond)?;
        let value = g.value(eps).clone();
        Ok(value)
    })?;
    let hypotheses = model.hypotheses(observed, &cond)?;
    let selection = select_best(&hypotheses, std::slice::from_ref(&shape), std::slice::from_ref(observed))?
        .pop()
        .ok_or_else(|| Error::Empty("selection".into()))?;
    Ok(Inference { shape, hypotheses, selection })
}

fn bbox_center(points: &Tensor) -> Vec3 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for i in 0..points.rows() {
        for c in 0..3 {
            lo[c] = lo[c].min(points.get(i, c));
            hi[c] = hi[c].max(points.get(i, c));
        }
    }
    [0, 1, 2].map(|c| (lo[c] + hi[c]) / 2.0)
}

/// World-frame box around a canonical shape placed by `pose` and `scale`.
pub fn placed_box(shape: &Tensor, pose: &Pose, scale: f64) -> Result<OrientedBox> {
    let c = bbox_center(shape);
    let r = pose.matrix();
    let t = [0, 1, 2].map(|a| pose.translation[a] + scale * (r[a][0] * c[0] + r[a][1] * c[1] + r[a][2] * c[2]));
    OrientedBox::new(Pose::new(pose.rotation, t)?, bbox_extents(shape).map(|e| (e * scale).max(1e-9)))
}

/// Scores a predicted shape, pose and scale against the ground truth.
pub fn score(inst: &Instance, shape: &Tensor, pose: &Pose, scale: f64, use_symmetry: bool) -> Result<EvalRecord> {
    let gt_box = OrientedBox::new(inst.pose, inst.extents.map(|e| e * inst.scale))?;
    let iou = iou3d(&gt_box, &placed_box(shape, pose, scale)?)?;
    let cd = cd_metric(shape, &inst.canonical)?;
    let symmetry = if use_symmetry { inst.category.symmetry() } else { None };
    Ok(EvalRecord::new(&inst.id, inst.category.name(), symmetry, &inst.pose, inst.scale, pose, scale, iou, cd))
}

/// Runs inference on every instance. Instance `k` draws its sampling noise
/// from its own stream so results do not depend on evaluation order.
pub fn evaluate<'a>(
    model: &Model,
    instances: impl IntoIterator<Item = (&'a Instance, &'a Tensor)>,
    seed: u64,
    use_symmetry: bool,
) -> Result<Vec<(EvalRecord, Inference)>> {
    instances
        .into_iter()
        .enumerate()
        .map(|(k, (inst, prior))| {
            let mut r = rng::stream(seed, 1000 + k as u64);
            let out = infer(model, &inst.observed, prior, &mut r)?;
            let record = score(inst, &out.shape, &out.selection.pose, out.selection.scale, use_symmetry)?;
            Ok((record, out))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose::axis_angle;

    #[test]
    fn placed_box_matches_the_ground_truth_box_for_the_true_shape() {
        let mut r = rng::seeded(3);
        let shape = rng::uniform_tensor(&mut r, 50, 3, -0.4, 0.3);
        let pose = Pose::new(axis_angle([0.1, 1.0, 0.2], 0.7), [0.2, -0.1, 0.9]).unwrap();
        let b = placed_box(&shape, &pose, 0.3).unwrap();
        // the shape bbox is off-centre, so the box centre moves with it
        let c = bbox_center(&shape);
        let placed = crate::geometry::pose::apply_pose(
            &Tensor::from_points(&[c]),
            &pose,
            &crate::geometry::pose::Scale::uniform(0.3).unwrap(),
        )
        .unwrap();
        for a in 0..3 {
            assert!((b.pose.translation[a] - placed.get(0, a)).abs() < 1e-12);
        }
        assert!((iou3d(&b, &b).unwrap() - 1.0).abs() < 1e-9);
    }
}
