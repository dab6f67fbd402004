use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::knn::sq_dist;
use super::pose::Vec3;

/// Point coordinates with optional per-point attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    coords: Tensor,
    normals: Option<Tensor>,
    colors: Option<Tensor>,
    features: Option<Tensor>,
}

impl PointCloud {
    pub fn new(coords: Tensor) -> Result<Self> {
        if coords.cols() != 3 {
            return Err(Error::Shape(format!("coordinates must be N x 3, got {:?}", coords.shape())));
        }
        if !coords.is_finite() {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        Ok(Self { coords, normals: None, colors: None, features: None })
    }

    pub fn from_points(points: &[Vec3]) -> Result<Self> {
        Self::new(Tensor::from_points(points))
    }

    pub fn with_normals(mut self, normals: Tensor) -> Result<Self> {
        if normals.shape() != self.coords.shape() {
            return Err(Error::Shape(format!("normals {:?} vs coords {:?}", normals.shape(), self.coords.shape())));
        }
        for i in 0..normals.rows() {
            let n = normals.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("normal {i} has norm {n}")));
            }
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn with_colors(mut self, colors: Tensor) -> Result<Self> {
        if colors.shape() != self.coords.shape() {
            return Err(Error::Shape(format!("colors {:?} vs coords {:?}", colors.shape(), self.coords.shape())));
        }
        if colors.data().iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidArgument("colors must lie in [0, 1]".into()));
        }
        self.colors = Some(colors);
        Ok(self)
    }

    pub fn with_features(mut self, features: Tensor) -> Result<Self> {
        if features.rows() != self.coords.rows() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} points",
                features.rows(),
                self.coords.rows()
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("point features".into()));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.rows() == 0
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    pub fn normals(&self) -> Option<&Tensor> {
        self.normals.as_ref()
    }

    pub fn colors(&self) -> Option<&Tensor> {
        self.colors.as_ref()
    }

    pub fn features(&self) -> Option<&Tensor> {
        self.features.as_ref()
    }

    pub fn into_coords(self) -> Tensor {
        self.coords
    }
}

pub fn centroid(points: &Tensor) -> Vec3 {
    let m = points.mean_rows();
    [m.data()[0], m.data()[1], m.data()[2]]
}

/// Root-mean-square distance of the rows from `center`.
pub fn rms_radius(points: &Tensor, center: &Vec3) -> f64 {
    let n = points.rows().max(1) as f64;
    let s: f64 = (0..points.rows()).map(|i| sq_dist(&points.point(i), center)).sum();
    (s / n).sqrt()
}

/// Rows shifted by `-center` and divided by `scale`.
pub fn normalize(points: &Tensor, center: &Vec3, scale: f64) -> Tensor {
    Tensor::from_fn(points.rows(), 3, |i, c| (points.get(i, c) - center[c]) / scale)
}

pub fn translate(points: &Tensor, v: &Vec3) -> Tensor {
    Tensor::from_fn(points.rows(), 3, |i, c| points.get(i, c) + v[c])
}

/// Side lengths of the axis-aligned bounding box.
pub fn bbox_extents(points: &Tensor) -> Vec3 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for i in 0..points.rows() {
        for c in 0..3 {
            lo[c] = lo[c].min(points.get(i, c));
            hi[c] = hi[c].max(points.get(i, c));
        }
    }
    [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]]
}

/// Farthest point sampling starting from row 0; ties go to the lowest index.
pub fn farthest_point_sample(points: &Tensor, m: usize) -> Result<Vec<usize>> {
    let n = points.rows();
    if m > n {
        return Err(Error::InvalidArgument(format!("cannot sample {m} of {n} points")));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = vec![0usize];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(0))).collect();
    while chosen.len() < m {
        let mut best = 0;
        for i in 1..n {
            if dist[i] > dist[best] {
                best = i;
            }
        }
        chosen.push(best);
        for i in 0..n {
            let d = sq_dist(points.row(i), points.row(best));
            if d < dist[i] {
                dist[i] = d;
            }
        }
    }
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariants_are_checked() {
        let c = Tensor::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        assert!(PointCloud::new(Tensor::zeros(2, 2)).is_err());
        assert!(PointCloud::new(Tensor::from_rows(&[[f64::INFINITY, 0.0, 0.0]]).unwrap()).is_err());
        let pc = PointCloud::new(c.clone()).unwrap();
        assert!(pc.clone().with_normals(Tensor::from_rows(&[[0.0, 0.0, 1.0], [0.0, 2.0, 0.0]]).unwrap()).is_err());
        assert!(pc.clone().with_normals(Tensor::from_rows(&[[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]).unwrap()).is_ok());
        assert!(pc.clone().with_features(Tensor::zeros(3, 4)).is_err());
        assert_eq!(pc.with_features(Tensor::zeros(2, 4)).unwrap().features().unwrap().cols(), 4);
    }

    #[test]
    fn farthest_point_sampling_spreads_out() {
        let p = Tensor::from_rows(&[[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [5.0, 0.0, 0.0], [2.5, 0.0, 0.0]]).unwrap();
        assert_eq!(farthest_point_sample(&p, 3).unwrap(), vec![0, 2, 3]);
        assert!(farthest_point_sample(&p, 5).is_err());
    }
}
