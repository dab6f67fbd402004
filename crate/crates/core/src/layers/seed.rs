use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Observed points followed by prior points moved onto their best-matching observed regions.
#[derive(Clone, Debug)]
pub struct SeedCloud {
    pub points: Tensor,
    pub observed: usize,
    /// For each prior point, the observed indices it was re-coordinated from, best first.
    pub matches: Vec<Vec<usize>>,
}

impl SeedCloud {
    pub fn prior_points(&self) -> Tensor {
        let idx: Vec<usize> = (self.observed..self.points.rows()).collect();
        self.points.select_rows(&idx)
    }
}

/// Each prior point lands on the centroid of the `k_seed` observed points whose
/// features have the largest dot product with its own.
pub fn generate_seed_points(
    observed: &Tensor,
    observed_feats: &Tensor,
    prior: &Tensor,
    prior_feats: &Tensor,
    k_seed: usize,
) -> Result<SeedCloud> {
    let n = observed.rows();
    if k_seed == 0 || k_seed > n {
        return Err(Error::InvalidArgument(format!("k_seed = {k_seed} with {n} observed points")));
    }
    if observed_feats.rows() != n || prior_feats.rows() != prior.rows() {
        return Err(Error::Shape("feature rows must match point rows".into()));
    }
    if observed_feats.cols() != prior_feats.cols() {
        return Err(Error::Shape(format!(
            "feature widths differ: {} vs {}",
            observed_feats.cols(),
            prior_feats.cols()
        )));
    }
    let corr = prior_feats.matmul(&observed_feats.transpose())?;
    let mut points = Tensor::zeros(n + prior.rows(), 3);
    for i in 0..n {
        points.row_mut(i).copy_from_slice(observed.row(i));
    }
    let mut matches = Vec::with_capacity(prior.rows());
    for p in 0..prior.rows() {
        let row = corr.row(p);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        order.truncate(k_seed);
        let mut c = [0.0; 3];
        for &j in &order {
            for k in 0..3 {
                c[k] += observed.get(j, k);
            }
        }
        points.row_mut(n + p).copy_from_slice(&c.map(|v| v / k_seed as f64));
        matches.push(order);
    }
    Ok(SeedCloud { points, observed: n, matches })
}
