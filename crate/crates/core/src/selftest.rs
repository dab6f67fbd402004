//! Quick invariant suite behind `equipose selftest`.

use serde::Serialize;

use crate::autograd::{Graph, ParamStore};
use crate::diffusion::elbo::{elbo_terms, rewriting_chain, sample_forward_trajectory, AffineReverse};
use crate::diffusion::make_schedule;
use crate::error::Result;
use crate::eval::metrics::{accuracy_at, pose_error, EvalRecord, Symmetry};
use crate::eval::{generate, iou3d, OrientedBox, Split, SynthSpec};
use crate::geometry::group::icosahedral_group;
use crate::geometry::knn::within_radius;
use crate::geometry::pose::{apply_pose, axis_angle, rotate_points, Pose, Scale};
use crate::heads::select::distance_grid;
use crate::heads::{select_best, HypothesisSet};
use crate::layers::graph_conv::{GraphConv, GraphEdges};
use crate::layers::group_conv::se3_group_conv;
use crate::layers::kernel::{canonical_offsets, radial_point_conv, ConvSupport, KernelLayout};
use crate::layers::nn::Builder;
use crate::pipeline::gradcheck::{check_model, GradCheckOptions};
use crate::pipeline::model::{compute_condition_latent, Conditioning, Model};
use crate::pipeline::train::samples;
use crate::pipeline::ModelConfig;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use rand::Rng as _;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(u64) -> Result<(bool, String)>;

const CHECKS: [(&str, Check); 9] = [
    ("group equivariance", equivariance),
    ("scale invariance", scale_invariance),
    ("noise schedule", schedule),
    ("variational bound", bound),
    ("gradient check", gradients),
    ("zero-init equivalence", zero_init),
    ("hypothesis selection", selection),
    ("box overlap", overlap),
    ("pose accuracy", accuracy),
];

/// Runs every check; errors count as failures.
pub fn run(seed: u64) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|(name, check)| match check(seed) {
            Ok((passed, detail)) => CheckOutcome { name, passed, detail },
            Err(e) => CheckOutcome { name, passed: false, detail: e.to_string() },
        })
        .collect()
}

fn equivariance(seed: u64) -> Result<(bool, String)> {
    let group = icosahedral_group();
    let mut r = rng::stream(seed, 1);
    let pts = rng::uniform_tensor(&mut r, 64, 3, -1.0, 1.0);
    let feats = rng::normal_tensor(&mut r, 64, 2);
    let w = rng::normal_tensor(&mut r, 2, 13 * 3);
    let offsets = group.neighborhood();
    let wg = rng::normal_tensor(&mut r, offsets.len() * 3, 2);
    let radius = 0.6;
    let kernel = KernelLayout::Shared(canonical_offsets(radius));
    let run = |p: &Tensor| -> Result<(Tensor, Tensor)> {
        let nb = within_radius(p, p, radius)?;
        let support = ConvSupport { centers: p, sources: p, neighbors: &nb, kernel: &kernel, sigma: radius / 2.0 };
        let g = Graph::detached();
        let lifted = radial_point_conv(&g, &support, g.constant(feats.clone()), g.constant(w.clone()), None, &group)?;
        let mixed = se3_group_conv(&g, lifted, 64, &group, &offsets, g.constant(wg.clone()))?;
        let out = (g.value(lifted).clone(), g.value(mixed).clone());
        Ok(out)
    };
    let (base_l, base_m) = run(&pts)?;
    let mut worst: f64 = 0.0;
    for h in 0..group.len() {
        let (l, m) = run(&rotate_points(&pts, group.element(h)))?;
        for c in 0..64 {
            for e in 0..group.len() {
                let (moved, orig) = (c * 60 + group.compose(h, e), c * 60 + e);
                for (a, b) in l.row(moved).iter().zip(base_l.row(orig)).chain(m.row(moved).iter().zip(base_m.row(orig))) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    Ok((worst <= 1e-6, format!("max deviation {worst:.2e} over 60 rotations")))
}

fn scale_invariance(seed: u64) -> Result<(bool, String)> {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, 2);
    let layer = GraphConv::new(&mut Builder::new(&mut store, &mut r), "gc", 4, 5, 6, 3);
    let pts = rng::uniform_tensor(&mut r, 32, 3, -1.0, 1.0);
    let hc = rng::normal_tensor(&mut r, 32, 4);
    let hk = rng::normal_tensor(&mut r, 32, 5);
    let run = |lambda: f64| -> Result<Tensor> {
        let p = pts.map(|v| v * lambda);
        let nb = within_radius(&p, &p, 0.7 * lambda)?;
        let e = GraphEdges::new(&p, &p, &nb, 0.7 * lambda)?;
        let g = Graph::new(&store);
        let out = layer.forward(&g, g.constant(hc.clone()), g.constant(hk.clone()), &e);
        let v = g.value(out).clone();
        Ok(v)
    };
    let base = run(1.0)?;
    let mut worst: f64 = 0.0;
    for lambda in [0.5, 2.0, 10.0] {
        worst = worst.max(run(lambda)?.zip_map(&base, |a, b| (a - b).abs()).max_abs() / base.max_abs());
    }
    Ok((worst <= 1e-9, format!("max relative change {worst:.2e}")))
}

fn schedule(_: u64) -> Result<(bool, String)> {
    let s = make_schedule(100, 1e-4, 0.05)?;
    let product: f64 = (1..=100).map(|t| 1.0 - (1e-4 + (0.05 - 1e-4) * (t - 1) as f64 / 99.0)).product();
    let diff = (s.alpha_bar(100) - product).abs();
    Ok((diff <= 1e-12, format!("alpha_bar(100) = {:.12}, deviation {diff:.1e}", s.alpha_bar(100))))
}

fn bound(seed: u64) -> Result<(bool, String)> {
    let s = make_schedule(10, 1e-3, 0.2)?;
    let k: Vec<f64> = (0..10).map(|i| 0.3 + 0.02 * i as f64).collect();
    let m = AffineReverse::from_linear_eps(&s, &k, &[-0.05, 0.05, 0.15])?;
    let x0 = [0.4, -0.8, 1.1];
    let terms = elbo_terms(&x0, &s, &m)?;
    let mut r = rng::stream(seed, 4);
    let mut spread: f64 = 0.0;
    for _ in 0..20 {
        let chain = rewriting_chain(&sample_forward_trajectory(&x0, &s, &mut r), &s, &m);
        let (lo, hi) = chain.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| (a.0.min(v), a.1.max(v)));
        spread = spread.max((hi - lo) / hi.abs().max(1.0));
    }
    let ok = m.exact_nll(&x0) <= terms.total() && spread <= 1e-9;
    Ok((ok, format!("bound {:.6} over nll {:.6}, rewriting spread {spread:.1e}", terms.total(), m.exact_nll(&x0))))
}

fn toy(seed: u64) -> Result<(Model, Vec<crate::pipeline::train::Sample>)> {
    let data = generate(&SynthSpec { train_per_category: 1, test_per_category: 1, points: 32, observed_points: 32, dense_points: 128, seed, ..SynthSpec::default() })?;
    let cfg = ModelConfig { width: 8, heads: 2, group_width: 4, pose_hidden: 8, kernel_size: 6, k_seed: 2, max_neighbors: 8, time_width: 8, ..ModelConfig::default() };
    Ok((Model::new(&cfg, seed, -0.5)?, samples(&data, Split::Train)?))
}

fn gradients(seed: u64) -> Result<(bool, String)> {
    let (model, data) = toy(seed)?;
    let report = check_model(&model, &data[0], 9, GradCheckOptions { per_tensor: Some(1), seed, ..GradCheckOptions::default() })?;
    Ok((report.passed(), format!("max relative error {:.2e} over {} tensors", report.max_rel_err(), report.tensors.len())))
}

fn zero_init(seed: u64) -> Result<(bool, String)> {
    let (mut model, data) = toy(seed)?;
    let mut r = rng::stream(seed, 6);
    let inputs: Vec<(Tensor, usize)> = (0..5).map(|_| (rng::normal_tensor(&mut r, 32, 3), r.gen_range(1..=20))).collect();
    let predict = |m: &Model, cond: &Conditioning| -> Result<Vec<Tensor>> {
        inputs
            .iter()
            .map(|(x, t)| {
                let g = Graph::new(&m.store);
                let v = m.predict_noise(&g, x, *t, cond)?;
                let out = g.value(v).clone();
                Ok(out)
            })
            .collect()
    };
    let s = &data[0];
    let before = predict(&model, &s.cond)?;
    let hyps_before = model.hypotheses(&s.observed, &s.cond)?;
    model.attach_control()?;
    let cond = s.cond.with_latent(Some(compute_condition_latent(&s.observed, &s.cond.prior, &model)?));
    let same = predict(&model, &cond)? == before && model.hypotheses(&s.observed, &cond)? == hyps_before;
    Ok((same, format!("{} inputs compared bitwise", inputs.len())))
}

fn random_pose(r: &mut Rng) -> Result<Pose> {
    let q = [rng::normal(r), rng::normal(r), rng::normal(r), rng::normal(r)];
    Pose::new(q, [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
}

fn selection(seed: u64) -> Result<(bool, String)> {
    let mut r = rng::stream(seed, 7);
    let mut agree = 0;
    for _ in 0..50 {
        let n = r.gen_range(1..6);
        let poses = (0..n).map(|_| random_pose(&mut r)).collect::<Result<Vec<_>>>()?;
        let sizes: Vec<f64> = (0..n).map(|_| r.gen_range(0.2..2.0)).collect();
        let canon = rng::uniform_tensor(&mut r, 10, 3, -0.5, 0.5);
        let obs = rng::uniform_tensor(&mut r, 8, 3, -1.0, 1.0);
        let grid = distance_grid(&poses, &sizes, &canon, &obs)?;
        let scan = (0..grid.len()).fold(0, |b, k| if grid[k] < grid[b] { k } else { b });
        let sel = &select_best(&HypothesisSet::new(vec![poses], vec![sizes.clone()])?, &[canon], &[obs])?[0];
        agree += usize::from(sel.indices == (scan / sizes.len(), scan % sizes.len()));
    }
    let canon = rng::uniform_tensor(&mut r, 40, 3, -0.5, 0.5);
    let gt = random_pose(&mut r)?;
    let obs = apply_pose(&canon, &gt, &Scale::uniform(0.2)?)?;
    let mut poses = (0..59).map(|_| random_pose(&mut r)).collect::<Result<Vec<_>>>()?;
    let mut sizes: Vec<f64> = (0..59).map(|_| r.gen_range(0.1..0.4)).collect();
    poses.insert(11, gt);
    sizes.insert(37, 0.2);
    let found = select_best(&HypothesisSet::new(vec![poses], vec![sizes])?, &[canon], &[obs])?[0].indices == (11, 37);
    Ok((agree == 50 && found, format!("{agree}/50 agree with the scan, ground truth found: {found}")))
}

fn overlap(_: u64) -> Result<(bool, String)> {
    let a = OrientedBox::new(Pose::identity(), [1.0; 3])?;
    let b = OrientedBox::new(Pose::new([1.0, 0.0, 0.0, 0.0], [0.5, 0.0, 0.0])?, [1.0; 3])?;
    let v = iou3d(&a, &b)?;
    Ok(((v - 1.0 / 3.0).abs() <= 1e-12, format!("half-shifted cubes give {v:.15}")))
}

fn accuracy(_: u64) -> Result<(bool, String)> {
    let gt = Pose::identity();
    let record = |deg: f64, cm: f64| -> Result<EvalRecord> {
        let pred = Pose::new(axis_angle([0.0, 0.0, 1.0], deg.to_radians()), [cm / 100.0, 0.0, 0.0])?;
        Ok(EvalRecord::new("r", "box", None, &gt, 0.2, &pred, 0.2, 1.0, 0.0))
    };
    let records = vec![record(1.0, 1.0)?, record(4.0, 3.0)?, record(8.0, 1.0)?];
    let got = [accuracy_at(&records, 5.0, 2.0)?, accuracy_at(&records, 5.0, 5.0)?, accuracy_at(&records, 10.0, 2.0)?];
    let expected = [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
    let quarter = Pose::new(axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2), [0.0; 3])?;
    let sym = pose_error(&quarter, &gt, Some(Symmetry { axis: [0.0, 0.0, 1.0], flip: false })).0;
    let ok = got.iter().zip(&expected).all(|(a, b)| (a - b).abs() < 1e-15) && sym < 1e-6;
    Ok((ok, format!("fractions {got:?}, symmetric quarter turn {sym:.1e} deg")))
}
