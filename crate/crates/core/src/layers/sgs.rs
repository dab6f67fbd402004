//! Shape-guided sampling: keep points whose features sit close to the prior,
//! then points the prior attends to most.

use crate::autograd::softmax_in_place;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the per-prior-row dot products are reduced to one score per point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreReduce {
    #[default]
    Mean,
    Max,
}

fn check_width(f: &Tensor, fr: &Tensor) -> Result<()> {
    if f.cols() != fr.cols() {
        return Err(Error::Shape(format!("feature widths differ: {} vs {}", f.cols(), fr.cols())));
    }
    Ok(())
}

/// Pairwise Euclidean feature distances, `n x N_r`.
pub fn sgs_distance_matrix(f: &Tensor, fr: &Tensor) -> Result<Tensor> {
    check_width(f, fr)?;
    Ok(Tensor::from_fn(f.rows(), fr.rows(), |i, j| crate::geometry::knn::sq_dist(f.row(i), fr.row(j)).sqrt()))
}

/// Row sums of the distance matrix.
pub fn sgs_aggregate(d: &Tensor) -> Vec<f64> {
    (0..d.rows()).map(|i| d.row(i).iter().sum()).collect()
}

/// Softmax over points of the reduced dot-product score against the prior features.
pub fn sgs_similarity(f: &Tensor, fr: &Tensor, reduce: ScoreReduce) -> Result<Vec<f64>> {
    check_width(f, fr)?;
    if fr.rows() == 0 {
        return Err(Error::Empty("prior features".into()));
    }
    let mut s: Vec<f64> = (0..f.rows())
        .map(|i| {
            let dots = (0..fr.rows()).map(|j| f.row(i).iter().zip(fr.row(j)).map(|(a, b)| a * b).sum::<f64>());
            match reduce {
                ScoreReduce::Mean => dots.sum::<f64>() / fr.rows() as f64,
                ScoreReduce::Max => dots.fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    softmax_in_place(&mut s);
    Ok(s)
}

/// Indices of the retained half, ascending.
pub fn shape_guided_sample(f: &Tensor, fr: &Tensor, reduce: ScoreReduce) -> Result<Vec<usize>> {
    let (mut out, sim) = shape_guided_split(f, fr, reduce)?;
    out.extend_from_slice(&sim);
    out.sort_unstable();
    Ok(out)
}

/// The distance-selected quarter and the similarity-selected remainder, in selection order.
pub fn shape_guided_split(f: &Tensor, fr: &Tensor, reduce: ScoreReduce) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = f.rows();
    if n < 4 {
        return Err(Error::InvalidArgument(format!("shape-guided sampling needs at least 4 points, got {n}")));
    }
    let nu = sgs_aggregate(&sgs_distance_matrix(f, fr)?);
    let alpha = sgs_similarity(f, fr, reduce)?;
    let quarter = n.div_ceil(4);
    let half = n / 2;
    let mut by_dist: Vec<usize> = (0..n).collect();
    by_dist.sort_by(|&a, &b| nu[a].total_cmp(&nu[b]).then(a.cmp(&b)));
    let mut taken = vec![false; n];
    let mut out: Vec<usize> = by_dist[..quarter].to_vec();
    for &i in &out {
        taken[i] = true;
    }
    let mut by_sim: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
    by_sim.sort_by(|&a, &b| alpha[b].total_cmp(&alpha[a]).then(a.cmp(&b)));
    by_sim.truncate(half - quarter);
    out.truncate(quarter);
    Ok((out, by_sim))
}
