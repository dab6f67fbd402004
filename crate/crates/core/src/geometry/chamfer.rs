use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::knn::{sq_dist, KdTree};

/// Squared distance from every row of `from` to its nearest row of `to`, with that row's index.
pub fn nearest_sq(from: &Tensor, to: &Tensor) -> Vec<(usize, f64)> {
    if to.rows() > 64 {
        let tree = KdTree::new(to);
        (0..from.rows()).map(|i| tree.nearest_one(&from.point(i))).collect()
    } else {
        (0..from.rows())
            .map(|i| {
                let mut best = (0, f64::INFINITY);
                for j in 0..to.rows() {
                    let d = sq_dist(from.row(i), to.row(j));
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                best
            })
            .collect()
    }
}

fn check(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Empty("point set distance needs non-empty sets".into()));
    }
    if a.cols() != 3 || b.cols() != 3 {
        return Err(Error::Shape("point set distance needs N x 3 sets".into()));
    }
    Ok(())
}

/// Summed bidirectional squared closest-point distance, used to rank hypotheses.
pub fn chamfer(a: &Tensor, b: &Tensor) -> Result<f64> {
    check(a, b)?;
    let ab: f64 = nearest_sq(a, b).iter().map(|p| p.1).sum();
    let ba: f64 = nearest_sq(b, a).iter().map(|p| p.1).sum();
    Ok(ab + ba)
}

/// Reconstruction metric: mean squared closest-point distance in each direction, added.
pub fn cd_metric(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check(pred, gt)?;
    let ab: f64 = nearest_sq(pred, gt).iter().map(|p| p.1).sum::<f64>() / pred.rows() as f64;
    let ba: f64 = nearest_sq(gt, pred).iter().map(|p| p.1).sum::<f64>() / gt.rows() as f64;
    Ok(ab + ba)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose::{apply_pose, Pose, Scale};
    use crate::rng;

    #[test]
    fn hand_cases() {
        let a = Tensor::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(chamfer(&a, &Tensor::zeros(0, 3)).is_err());
        // pred {0, 2}, gt {0}: forward mean (0 + 4)/2 = 2, backward 0
        let p = Tensor::from_rows(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(cd_metric(&p, &a).unwrap(), 2.0);
    }

    #[test]
    fn invariant_under_rigid_motion() {
        let mut g = rng::seeded(9);
        let a = rng::uniform_tensor(&mut g, 100, 3, -1.0, 1.0);
        let b = rng::uniform_tensor(&mut g, 80, 3, -1.0, 1.0);
        let pose = Pose::new([0.3, 0.5, -0.2, 0.7], [1.0, -2.0, 0.5]).unwrap();
        let s = Scale::uniform(1.0).unwrap();
        let ta = apply_pose(&a, &pose, &s).unwrap();
        let tb = apply_pose(&b, &pose, &s).unwrap();
        let (d0, d1) = (chamfer(&a, &b).unwrap(), chamfer(&ta, &tb).unwrap());
        assert!((d0 - d1).abs() < 1e-9 * d0.max(1.0));
        assert!((chamfer(&a, &b).unwrap() - chamfer(&b, &a).unwrap()).abs() < 1e-12);
    }
}
