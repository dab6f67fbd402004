//! Procedural category datasets: parametric shape families, tabletop poses,
//! single-view partial observations and per-category mean priors.
//!
//! Within a category every instance is generated from the same parametric
//! sample sites, so point `k` of one instance corresponds to point `k` of any
//! other and the prior is a vertex-wise mean.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::cloud::{bbox_extents, farthest_point_sample, PointCloud};
use crate::geometry::io::{read_epc, write_atomic, write_epc};
use crate::geometry::pose::{axis_angle, cross, dot, norm, quat_mul, transform_points, Pose, Vec3};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

use super::metrics::Symmetry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    /// Rectangular footprint with a top that slopes along x, so no rotation
    /// other than the identity maps it onto itself.
    Box,
    Cylinder,
    Bottle,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Box, Category::Cylinder, Category::Bottle];

    /// Rotational symmetry in the canonical frame. The closed cylinder is
    /// also unchanged when turned upside down.
    pub fn symmetry(self) -> Option<Symmetry> {
        match self {
            Category::Box => None,
            Category::Cylinder => Some(Symmetry { axis: [0.0, 0.0, 1.0], flip: true }),
            Category::Bottle => Some(Symmetry { axis: [0.0, 0.0, 1.0], flip: false }),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Box => "box",
            Category::Cylinder => "cylinder",
            Category::Bottle => "bottle",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown category {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub categories: Vec<Category>,
    pub train_per_category: usize,
    pub test_per_category: usize,
    /// Points in each canonical cloud and in each prior.
    pub points: usize,
    /// Points kept in each partial observation.
    pub observed_points: usize,
    /// Surface samples drawn before visibility culling.
    pub dense_points: usize,
    /// Observation noise standard deviation as a fraction of object size.
    pub noise: f64,
    /// Skip hidden-surface removal and resampling: the observation is the posed canonical cloud.
    pub full_visibility: bool,
    pub max_tilt_deg: f64,
    /// Object size (bounding-box diagonal) range in metres.
    pub size_range: [f64; 2],
    /// Half-width of the horizontal placement region in metres.
    pub placement: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            categories: Category::ALL.to_vec(),
            train_per_category: 32,
            test_per_category: 8,
            points: 128,
            observed_points: 64,
            dense_points: 512,
            noise: 0.0,
            full_visibility: false,
            max_tilt_deg: 10.0,
            size_range: [0.1, 0.3],
            placement: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic dataset: {m}")));
        if self.categories.is_empty() {
            return bad("no categories");
        }
        if self.train_per_category == 0 {
            return bad("at least one training instance per category is needed for the prior");
        }
        if self.points < 8 || self.observed_points < 8 || self.dense_points < self.observed_points {
            return bad("point counts too small");
        }
        if !(self.noise >= 0.0) || !(self.max_tilt_deg >= 0.0) || !(self.placement >= 0.0) {
            return bad("noise, tilt and placement must be non-negative");
        }
        if !(self.size_range[0] > 0.0 && self.size_range[0] <= self.size_range[1]) {
            return bad("size range must be positive and ordered");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: String,
    pub category: Category,
    pub split: Split,
    /// Full canonical cloud, centred with unit bounding-box diagonal.
    pub canonical: Tensor,
    /// Partial observation in the world frame.
    pub observed: Tensor,
    pub pose: Pose,
    /// Bounding-box diagonal in metres.
    pub scale: f64,
    /// Canonical bounding-box side lengths.
    pub extents: Vec3,
    /// Unit vector from the object towards the camera, world frame.
    pub view: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub instances: Vec<Instance>,
    pub priors: BTreeMap<Category, Tensor>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Instance> + '_ {
        self.instances.iter().filter(move |i| i.split == split)
    }

    pub fn prior(&self, c: Category) -> Result<&Tensor> {
        self.priors.get(&c).ok_or_else(|| Error::InvalidArgument(format!("no prior for category {c}")))
    }
}

/// A canonical surface sample with its outward normal.
struct Surface {
    points: Vec<Vec3>,
    normals: Vec<Vec3>,
}

fn unit(v: Vec3) -> Vec3 {
    let n = norm(&v);
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Picks a face by cumulative weight; `u` in `[0, 1)`.
fn pick(u: f64, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w / total;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

fn draw_params(c: Category, rng: &mut Rng) -> Vec<f64> {
    match c {
        Category::Box => {
            let h1 = rng.gen_range(0.5..1.0);
            vec![rng.gen_range(0.6..1.4), rng.gen_range(0.4..1.0), h1, h1 * rng.gen_range(0.3..0.7)]
        }
        Category::Cylinder => vec![rng.gen_range(0.2..0.6), rng.gen_range(0.5..1.5)],
        Category::Bottle => {
            let r = rng.gen_range(0.25..0.45);
            vec![r, rng.gen_range(0.5..0.9), rng.gen_range(0.15..0.3), r * rng.gen_range(0.3..0.45), rng.gen_range(0.15..0.35)]
        }
    }
}

fn template_params(c: Category) -> Vec<f64> {
    match c {
        Category::Box => vec![1.0, 0.7, 0.75, 0.375],
        Category::Cylinder => vec![0.4, 1.0],
        Category::Bottle => vec![0.35, 0.7, 0.22, 0.13, 0.25],
    }
}

fn face_areas(c: Category, p: &[f64]) -> Vec<f64> {
    match c {
        Category::Box => {
            let (a, b, h1, h2) = (p[0], p[1], p[2], p[3]);
            let side = a * (h1 + h2) / 2.0;
            vec![a * b, (a * a + (h1 - h2) * (h1 - h2)).sqrt() * b, side, side, b * h1, b * h2]
        }
        Category::Cylinder => {
            let (r, h) = (p[0], p[1]);
            vec![2.0 * PI * r * h, PI * r * r, PI * r * r]
        }
        Category::Bottle => {
            let (r, hb, hs, rn, hn) = (p[0], p[1], p[2], p[3], p[4]);
            let slant = ((r - rn) * (r - rn) + hs * hs).sqrt();
            vec![PI * r * r, 2.0 * PI * r * hb, PI * (r + rn) * slant, 2.0 * PI * rn * hn, PI * rn * rn]
        }
    }
}

/// Maps a parametric site `(face, v, w)` to a surface point and normal.
fn surface_point(c: Category, p: &[f64], face: usize, v: f64, w: f64) -> (Vec3, Vec3) {
    match c {
        Category::Box => {
            let (a, b, h1, h2) = (p[0], p[1], p[2], p[3]);
            let x = (v - 0.5) * a;
            let height = |x: f64| h1 + (h2 - h1) * (x / a + 0.5);
            match face {
                0 => ([x, (w - 0.5) * b, 0.0], [0.0, 0.0, -1.0]),
                1 => ([x, (w - 0.5) * b, height(x)], unit([-(h2 - h1) / a, 0.0, 1.0])),
                2 => ([x, b / 2.0, w * height(x)], [0.0, 1.0, 0.0]),
                3 => ([x, -b / 2.0, w * height(x)], [0.0, -1.0, 0.0]),
                4 => ([-a / 2.0, (v - 0.5) * b, w * h1], [-1.0, 0.0, 0.0]),
                _ => ([a / 2.0, (v - 0.5) * b, w * h2], [1.0, 0.0, 0.0]),
            }
        }
        Category::Cylinder => {
            let (r, h) = (p[0], p[1]);
            let th = 2.0 * PI * v;
            match face {
                0 => ([r * th.cos(), r * th.sin(), w * h], [th.cos(), th.sin(), 0.0]),
                f => {
                    let (rr, phi) = (r * v.sqrt(), 2.0 * PI * w);
                    let (z, nz) = if f == 1 { (h, 1.0) } else { (0.0, -1.0) };
                    ([rr * phi.cos(), rr * phi.sin(), z], [0.0, 0.0, nz])
                }
            }
        }
        Category::Bottle => {
            let (r, hb, hs, rn, hn) = (p[0], p[1], p[2], p[3], p[4]);
            let th = 2.0 * PI * v;
            let (ct, st) = (th.cos(), th.sin());
            match face {
                0 => {
                    let (rr, phi) = (r * v.sqrt(), 2.0 * PI * w);
                    ([rr * phi.cos(), rr * phi.sin(), 0.0], [0.0, 0.0, -1.0])
                }
                1 => ([r * ct, r * st, w * hb], [ct, st, 0.0]),
                2 => {
                    let rad = r + (rn - r) * w;
                    ([rad * ct, rad * st, hb + w * hs], unit([ct * hs, st * hs, r - rn]))
                }
                3 => ([rn * ct, rn * st, hb + hs + w * hn], [ct, st, 0.0]),
                _ => {
                    let (rr, phi) = (rn * v.sqrt(), 2.0 * PI * w);
                    ([rr * phi.cos(), rr * phi.sin(), hb + hs + hn], [0.0, 0.0, 1.0])
                }
            }
        }
    }
}

/// Parametric sample sites shared by every instance of a category.
fn sample_sites(c: Category, n: usize, rng: &mut Rng) -> Vec<(usize, f64, f64)> {
    let areas = face_areas(c, &template_params(c));
    (0..n)
        .map(|_| {
            let face = pick(rng.gen::<f64>(), &areas);
            (face, rng.gen::<f64>(), rng.gen::<f64>())
        })
        .collect()
}

/// Surface at the given sites, centred on its bounding box and scaled to unit diagonal.
fn build_surface(c: Category, params: &[f64], sites: &[(usize, f64, f64)]) -> Surface {
    let (points, normals): (Vec<Vec3>, Vec<Vec3>) =
        sites.iter().map(|&(f, v, w)| surface_point(c, params, f, v, w)).unzip();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
    let diag = norm(&[hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]]);
    let points = points.iter().map(|p| [(p[0] - center[0]) / diag, (p[1] - center[1]) / diag, (p[2] - center[2]) / diag]).collect();
    Surface { points, normals }
}

/// Yaw uniform on the circle, then a tilt of at most `max_tilt` about a random horizontal axis.
fn tabletop_rotation(max_tilt_deg: f64, rng: &mut Rng) -> [f64; 4] {
    let yaw = axis_angle([0.0, 0.0, 1.0], rng.gen_range(0.0..2.0 * PI));
    let az = rng.gen_range(0.0..2.0 * PI);
    let tilt = axis_angle([az.cos(), az.sin(), 0.0], rng.gen::<f64>() * max_tilt_deg.to_radians());
    quat_mul(tilt, yaw)
}

/// Points facing `view` that are not hidden behind closer geometry along it.
fn visible(points: &[Vec3], normals: &[Vec3], view: &Vec3, cell: f64) -> Vec<usize> {
    let up = if view[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
    let e1 = unit(cross(view, &up));
    let e2 = cross(view, &e1);
    let key = |p: &Vec3| ((dot(p, &e1) / cell).floor() as i64, (dot(p, &e2) / cell).floor() as i64);
    let front: Vec<usize> = (0..points.len()).filter(|&i| dot(&normals[i], view) > 0.0).collect();
    let mut depth: BTreeMap<(i64, i64), f64> = BTreeMap::new();
    for &i in &front {
        let d = dot(&points[i], view);
        let e = depth.entry(key(&points[i])).or_insert(f64::NEG_INFINITY);
        *e = e.max(d);
    }
    front.into_iter().filter(|&i| dot(&points[i], view) >= depth[&key(&points[i])] - 2.0 * cell).collect()
}

fn make_instance(spec: &SynthSpec, c: Category, split: Split, k: usize, sites: &[(usize, f64, f64)], rng: &mut Rng) -> Result<Instance> {
    let params = draw_params(c, rng);
    let surface = build_surface(c, &params, sites);
    let canonical = Tensor::from_points(&surface.points);
    let extents = bbox_extents(&canonical);
    let scale = rng.gen_range(spec.size_range[0]..=spec.size_range[1]);
    let rotation = tabletop_rotation(spec.max_tilt_deg, rng);
    let translation = [
        rng.gen_range(-spec.placement..=spec.placement),
        rng.gen_range(-spec.placement..=spec.placement),
        scale * 0.5,
    ];
    let pose = Pose::new(rotation, translation)?;
    let elevation = rng.gen_range(15f64..60.0).to_radians();
    let azimuth = rng.gen_range(0.0..2.0 * PI);
    let view = [elevation.cos() * azimuth.cos(), elevation.cos() * azimuth.sin(), elevation.sin()];
    let r = pose.matrix();

    let observed = if spec.full_visibility {
        transform_points(&canonical, &r, scale, &translation)
    } else {
        let dense_sites = sample_sites(c, spec.dense_points, rng);
        let dense = build_surface(c, &params, &dense_sites);
        let posed = transform_points(&Tensor::from_points(&dense.points), &r, scale, &translation);
        let normals = transform_points(&Tensor::from_points(&dense.normals), &r, 1.0, &[0.0; 3]);
        let pts = posed.to_points();
        let nrm = normals.to_points();
        let keep = visible(&pts, &nrm, &view, 0.04 * scale);
        if keep.len() < spec.observed_points {
            return Err(Error::InvalidArgument(format!(
                "only {} visible points for instance {k} of {c}; raise dense_points",
                keep.len()
            )));
        }
        let vis = posed.select_rows(&keep);
        let idx = farthest_point_sample(&vis, spec.observed_points)?;
        let mut obs = vis.select_rows(&idx);
        if spec.noise > 0.0 {
            let sd = spec.noise * scale;
            for v in obs.data_mut() {
                *v += sd * rng::normal(rng);
            }
        }
        obs
    };
    Ok(Instance {
        canonical: single_precision(&canonical),
        observed: single_precision(&observed),
        id: format!("{}_{}_{k:04}", c.name(), if split == Split::Train { "train" } else { "test" }),
        category: c,
        split,
        pose,
        scale,
        extents,
        view,
    })
}

/// Clouds are stored at single precision on disk; rounding at generation
/// time makes the in-memory dataset identical to its files.
fn single_precision(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

/// Generates the dataset in memory. Every category and split draws from its own stream.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut instances = Vec::new();
    let mut priors = BTreeMap::new();
    for &c in &spec.categories {
        let sites = sample_sites(c, spec.points, &mut rng::stream(spec.seed, 1000 + c.index() as u64));
        for (split, count, sid) in [(Split::Train, spec.train_per_category, 0u64), (Split::Test, spec.test_per_category, 1)] {
            let mut r = rng::stream(spec.seed, 10 * c.index() as u64 + sid);
            for k in 0..count {
                instances.push(make_instance(spec, c, split, k, &sites, &mut r)?);
            }
        }
        let train: Vec<&Instance> = instances.iter().filter(|i| i.category == c && i.split == Split::Train).collect();
        let mut mean = Tensor::zeros(spec.points, 3);
        for i in &train {
            mean.add_assign(&i.canonical);
        }
        mean.scale_assign(1.0 / train.len() as f64);
        priors.insert(c, single_precision(&mean));
    }
    Ok(Dataset { spec: spec.clone(), instances, priors })
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    id: String,
    category: Category,
    split: Split,
    pose: Pose,
    scale: f64,
    extents: Vec3,
    view: Vec3,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: SynthSpec,
    instances: Vec<InstanceRecord>,
}

/// Writes `manifest.json`, `priors/<category>.epc`, and per instance
/// `<id>.canonical.epc` and `<id>.observed.epc`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir.join("priors")).map_err(|e| Error::io(dir, e))?;
    std::fs::create_dir_all(dir.join("instances")).map_err(|e| Error::io(dir, e))?;
    for (c, p) in &data.priors {
        write_epc(&dir.join("priors").join(format!("{c}.epc")), &PointCloud::new(p.clone())?)?;
    }
    let mut records = Vec::with_capacity(data.instances.len());
    for i in &data.instances {
        let base = dir.join("instances");
        write_epc(&base.join(format!("{}.canonical.epc", i.id)), &PointCloud::new(i.canonical.clone())?)?;
        write_epc(&base.join(format!("{}.observed.epc", i.id)), &PointCloud::new(i.observed.clone())?)?;
        records.push(InstanceRecord {
            id: i.id.clone(),
            category: i.category,
            split: i.split,
            pose: i.pose,
            scale: i.scale,
            extents: i.extents,
            view: i.view,
        });
    }
    let manifest = Manifest { spec: data.spec.clone(), instances: records };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&dir.join("manifest.json"), text.as_bytes())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut priors = BTreeMap::new();
    for &c in &manifest.spec.categories {
        priors.insert(c, read_epc(&dir.join("priors").join(format!("{c}.epc")))?.into_coords());
    }
    let mut instances = Vec::with_capacity(manifest.instances.len());
    for r in manifest.instances {
        let base = dir.join("instances");
        let canonical = read_epc(&base.join(format!("{}.canonical.epc", r.id)))?.into_coords();
        let observed = read_epc(&base.join(format!("{}.observed.epc", r.id)))?.into_coords();
        instances.push(Instance {
            id: r.id,
            category: r.category,
            split: r.split,
            canonical,
            observed,
            pose: r.pose,
            scale: r.scale,
            extents: r.extents,
            view: r.view,
        });
    }
    Ok(Dataset { spec: manifest.spec, instances, priors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose::apply_pose;
    use crate::geometry::pose::Scale;

    fn small() -> SynthSpec {
        SynthSpec { train_per_category: 4, test_per_category: 2, ..Default::default() }
    }

    #[test]
    fn canonical_clouds_have_unit_diagonal() {
        let d = generate(&small()).unwrap();
        assert_eq!(d.instances.len(), 18);
        for i in &d.instances {
            let e = i.extents;
            assert!((norm(&e) - 1.0).abs() < 1e-6);
            assert_eq!(i.canonical.shape(), (128, 3));
            assert_eq!(i.observed.shape(), (64, 3));
        }
    }

    #[test]
    fn prior_is_vertex_mean_of_training_instances() {
        let d = generate(&small()).unwrap();
        for c in Category::ALL {
            let train: Vec<_> = d.split(Split::Train).filter(|i| i.category == c).collect();
            let p = d.prior(c).unwrap();
            for r in 0..p.rows() {
                for k in 0..3 {
                    let m = train.iter().map(|i| i.canonical.get(r, k)).sum::<f64>() / train.len() as f64;
                    assert!((p.get(r, k) - m).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn full_visibility_without_noise_is_the_posed_canonical_cloud() {
        let spec = SynthSpec { full_visibility: true, ..small() };
        let d = generate(&spec).unwrap();
        for i in &d.instances {
            let posed = apply_pose(&i.canonical, &i.pose, &Scale::uniform(i.scale).unwrap()).unwrap();
            assert!(posed.zip_map(&i.observed, |a, b| (a - b).abs()).max_abs() < 1e-6);
        }
    }

    #[test]
    fn partial_views_face_the_camera() {
        let d = generate(&small()).unwrap();
        for i in &d.instances {
            let c = [i.pose.translation[0], i.pose.translation[1], i.pose.translation[2]];
            let mean_depth: f64 = (0..i.observed.rows())
                .map(|r| dot(&crate::geometry::pose::sub(&i.observed.point(r), &c), &i.view))
                .sum::<f64>()
                / i.observed.rows() as f64;
            assert!(mean_depth > 0.0, "{}", i.id);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let d = generate(&small()).unwrap();
        write_dataset(a.path(), &d).unwrap();
        write_dataset(b.path(), &generate(&small()).unwrap()).unwrap();
        let read = |p: &Path| std::fs::read(p.join("manifest.json")).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
        let back = read_dataset(a.path()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate(&SynthSpec { categories: vec![], ..small() }).is_err());
        assert!(generate(&SynthSpec { size_range: [0.3, 0.1], ..small() }).is_err());
        assert!("mug".parse::<Category>().is_err());
        assert_eq!("bottle".parse::<Category>().unwrap(), Category::Bottle);
    }
}
