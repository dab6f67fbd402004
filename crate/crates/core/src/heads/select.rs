//! Joint pose/size selection by Chamfer distance to the observation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::chamfer::chamfer;
use crate::geometry::pose::{apply_pose, Pose, Scale};
use crate::tensor::Tensor;

use super::hypotheses::HypothesisSet;

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub pose: Pose,
    pub scale: f64,
    /// The canonical shape under the selected pose and scale.
    pub posed: Tensor,
    pub chamfer: f64,
    /// `(pose index, size index)`.
    pub indices: (usize, usize),
}

/// JSON form of a selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub quaternion: [f64; 4],
    pub translation_m: [f64; 3],
    pub scale: f64,
    pub chamfer: f64,
    pub hypothesis_indices: [usize; 2],
}

impl From<&Selection> for SelectionRecord {
    fn from(s: &Selection) -> Self {
        Self {
            quaternion: s.pose.rotation,
            translation_m: s.pose.translation,
            scale: s.scale,
            chamfer: s.chamfer,
            hypothesis_indices: [s.indices.0, s.indices.1],
        }
    }
}

/// Distance of every `(i, j)` pair for one object, row-major in `i`.
pub fn distance_grid(poses: &[Pose], sizes: &[f64], canon: &Tensor, observed: &Tensor) -> Result<Vec<f64>> {
    if observed.rows() == 0 {
        return Err(Error::Empty("observed cloud".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..poses.len()).flat_map(|i| (0..sizes.len()).map(move |j| (i, j))).collect();
    pairs
        .par_iter()
        .map(|&(i, j)| chamfer(&apply_pose(canon, &poses[i], &Scale::uniform(sizes[j])?)?, observed))
        .collect()
}

/// For every object, the `(i, j)` minimizing the Chamfer distance between
/// the posed canonical shape and the observation; ties go to the smallest
/// `i`, then `j`.
pub fn select_best(hyps: &HypothesisSet, canon: &[Tensor], observed: &[Tensor]) -> Result<Vec<Selection>> {
    let k = hyps.objects();
    if canon.len() != k || observed.len() != k {
        return Err(Error::Shape(format!("{k} hypothesis rows, {} shapes, {} observations", canon.len(), observed.len())));
    }
    (0..k)
        .map(|o| {
            let (poses, sizes) = (&hyps.poses[o], &hyps.sizes[o]);
            let grid = distance_grid(poses, sizes, &canon[o], &observed[o])?;
            let mut best = 0;
            for (idx, d) in grid.iter().enumerate() {
                if d.is_nan() {
                    return Err(Error::NonFinite("hypothesis distance".into()));
                }
                if *d < grid[best] {
                    best = idx;
                }
            }
            let (i, j) = (best / sizes.len(), best % sizes.len());
            let posed = apply_pose(&canon[o], &poses[i], &Scale::uniform(sizes[j])?)?;
            Ok(Selection { pose: poses[i], scale: sizes[j], posed, chamfer: grid[best], indices: (i, j) })
        })
        .collect()
}
