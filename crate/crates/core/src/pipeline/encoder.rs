//! Four-stage pyramid encoder and the upsampling decoder.

use std::rc::Rc;

use crate::autograd::{Csr, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::group::RotationGroup;
use crate::geometry::knn::{knn, sq_dist, KdTree};
use crate::layers::nn::{Builder, Linear};
use crate::layers::ort::{BlockConfig, BlockInput, OrtBlock, SimpleBlock};
use crate::layers::sgs::{shape_guided_sample, ScoreReduce};
use crate::tensor::Tensor;

pub const STAGES: usize = 4;

/// Resolution plan of one pyramid pass: for each stage the rows kept from
/// the previous level, the resulting points and the neighbourhood radius.
#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub keep: Vec<usize>,
    pub points: Tensor,
    pub radius: f64,
}

pub struct PyramidOutput {
    pub levels: Vec<Level>,
    /// `F_1 … F_4`.
    pub feats: Vec<Var>,
    pub group_maps: Vec<Var>,
}

/// Twice the median nearest-neighbour distance, floored away from zero.
pub fn base_radius(points: &Tensor) -> f64 {
    let n = points.rows();
    if n < 2 {
        return 1.0;
    }
    let tree = KdTree::new(points);
    let mut d: Vec<f64> = (0..n)
        .map(|i| {
            let nb = tree.nearest(&points.point(i), 2);
            nb.iter().filter(|&&j| j != i).map(|&j| sq_dist(points.row(i), points.row(j)).sqrt()).next().unwrap_or(0.0)
        })
        .collect();
    d.sort_by(f64::total_cmp);
    (2.0 * d[n / 2]).max(1e-6)
}

#[derive(Clone, Debug)]
pub struct Pyramid {
    pub blocks: Vec<OrtBlock>,
}

impl Pyramid {
    pub fn new(b: &mut Builder, name: &str, config: &BlockConfig, group: Option<&RotationGroup>) -> Result<Self> {
        let mut s = b.sub(name);
        let blocks = (0..STAGES).map(|l| OrtBlock::new(&mut s, &l.to_string(), config, group)).collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    /// Runs the four stages. Without a `plan`, each stage keeps the half
    /// chosen by shape-guided sampling and the radius doubles from the
    /// first level's base radius; with a plan the same resolutions are reused.
    /// `prior` must be ordered so that every prefix is a good subsample.
    pub fn forward(
        &self,
        g: &Graph,
        points: &Tensor,
        feats: Var,
        prior: &Tensor,
        prior_feats: Var,
        group: &RotationGroup,
        plan: Option<&[Level]>,
    ) -> Result<PyramidOutput> {
        if let Some(p) = plan {
            if p.len() != STAGES {
                return Err(Error::Shape(format!("plan has {} levels, expected {STAGES}", p.len())));
            }
        }
        let mut levels: Vec<Level> = Vec::with_capacity(STAGES);
        let mut out_feats = Vec::with_capacity(STAGES);
        let mut maps = Vec::new();
        let (mut pts, mut f, mut pf) = (points.clone(), feats, prior_feats);
        for (l, block) in self.blocks.iter().enumerate() {
            let level = match plan {
                Some(p) => p[l].clone(),
                None => {
                    let keep = shape_guided_sample(&g.value(f), &g.value(pf), ScoreReduce::Mean)?;
                    let kept = pts.select_rows(&keep);
                    let radius = match levels.last() {
                        None => base_radius(&kept),
                        Some(prev) => 2.0 * prev.radius,
                    };
                    Level { keep, points: kept, radius }
                }
            };
            let n = level.keep.len();
            if n > prior.rows() || n > g.shape(pf).0 {
                return Err(Error::Shape(format!("stage {l} keeps {n} points but the prior has {}", prior.rows())));
            }
            let prefix: Vec<usize> = (0..n).collect();
            let obs_f = g.gather_rows(f, &level.keep);
            let pri_f = g.gather_rows(pf, &prefix);
            let pri_pts = prior.select_rows(&prefix);
            let input = BlockInput { observed: &level.points, observed_feats: obs_f, prior: &pri_pts, prior_feats: pri_f, radius: level.radius };
            let out = block.forward(g, input, group)?;
            if let Some(m) = out.group_map {
                maps.push(m);
            }
            pts = level.points.clone();
            f = out.feats;
            pf = out.prior_feats;
            out_feats.push(f);
            levels.push(level);
        }
        Ok(PyramidOutput { levels, feats: out_feats, group_maps: maps })
    }
}

/// Inverse-distance weights of the 3 nearest coarse points for every fine point.
pub fn interpolation_map(fine: &Tensor, coarse: &Tensor) -> Result<Csr> {
    let k = coarse.rows().min(3);
    if k == 0 {
        return Err(Error::Empty("coarse level".into()));
    }
    let nn = knn(fine, coarse, k)?;
    let mut m = Csr::builder(coarse.rows());
    for (i, row) in nn.iter().enumerate() {
        let w: Vec<f64> = row.iter().map(|&j| 1.0 / (sq_dist(fine.row(i), coarse.row(j)).sqrt() + 1e-8)).collect();
        let total: f64 = w.iter().sum();
        for (&j, wj) in row.iter().zip(&w) {
            m.push(j, wj / total);
        }
        m.finish_row();
    }
    Ok(m)
}

/// Four upsampling stages from `F_4` back to the full resolution.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub fuse: Vec<Linear>,
    pub blocks: Vec<SimpleBlock>,
}

impl Decoder {
    pub fn new(b: &mut Builder, name: &str, config: &BlockConfig) -> Result<Self> {
        let d = config.width;
        let mut s = b.sub(name);
        let mut fuse = Vec::with_capacity(STAGES);
        let mut blocks = Vec::with_capacity(STAGES);
        for k in 0..STAGES {
            fuse.push(Linear::new(&mut s, &format!("{k}.fuse"), 2 * d, d));
            blocks.push(SimpleBlock::new(&mut s, &format!("{k}.block"), config)?);
        }
        Ok(Self { fuse, blocks })
    }

    /// `skips[0]` is the stem output at full resolution, `skips[l]` the
    /// stage-`l` features; `points[l]`/`radii[l]` describe level `l`.
    pub fn forward(&self, g: &Graph, skips: &[Var], points: &[&Tensor], radii: &[f64]) -> Result<Var> {
        if skips.len() != STAGES + 1 || points.len() != STAGES + 1 || radii.len() != STAGES + 1 {
            return Err(Error::Shape("decoder needs five levels of skips, points and radii".into()));
        }
        let mut x = skips[STAGES];
        for k in 0..STAGES {
            let (coarse, fine) = (STAGES - k, STAGES - k - 1);
            if g.shape(x).0 != points[coarse].rows() || g.shape(skips[fine]).0 != points[fine].rows() {
                return Err(Error::Shape(format!("decoder level {fine} rows do not match its points")));
            }
            let up = g.sparse(Rc::new(interpolation_map(points[fine], points[coarse])?), x);
            let fused = g.silu(self.fuse[k].forward(g, g.concat_cols(&[up, skips[fine]])));
            x = self.blocks[k].forward(g, points[fine], fused, radii[fine])?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_rows_are_convex_weights() {
        let mut r = crate::rng::seeded(1);
        let fine = crate::rng::uniform_tensor(&mut r, 20, 3, -1.0, 1.0);
        let coarse = fine.select_rows(&[0, 4, 9, 13, 17]);
        let m = interpolation_map(&fine, &coarse).unwrap();
        let out = m.apply(&coarse);
        for i in 0..20 {
            let total: f64 = m.row(i).map(|(_, w)| w).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        // a fine point that is also coarse is reproduced
        assert!((0..3).all(|c| (out.get(4, c) - fine.get(4, c)).abs() < 1e-6));
    }

    #[test]
    fn base_radius_of_a_grid() {
        let pts: Vec<[f64; 3]> = (0..27).map(|i| [(i % 3) as f64 * 0.1, ((i / 3) % 3) as f64 * 0.1, (i / 9) as f64 * 0.1]).collect();
        assert!((base_radius(&Tensor::from_points(&pts)) - 0.2).abs() < 1e-12);
    }
}
