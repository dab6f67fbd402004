//! Central finite-difference check of analytic parameter gradients.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::diffusion::loss::noise_penalty;
use crate::diffusion::{forward_sample, LossNorm};
use crate::tensor::Tensor;

use super::model::{compute_condition_latent, Model};
use super::train::{pose_loss, Sample};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Entries checked per tensor; `None` checks every entry.
    pub per_tensor: Option<usize>,
    /// Gradients below `floor · max(1, |loss|)` are compared in absolute
    /// terms, since central differences cannot resolve them more finely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tol: 1e-4, per_tensor: None, floor: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst entry.
    pub worst: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub tol: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&TensorCheck> {
        self.tensors.iter().filter(|t| !(t.max_rel_err <= self.tol)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

fn loss_value(store: &ParamStore, loss: &impl Fn(&Graph) -> Result<Var>) -> Result<f64> {
    let g = Graph::new(store);
    let l = loss(&g)?;
    let v = g.value(l).get(0, 0);
    Ok(v)
}

/// Analytic gradients of `loss` for every parameter, indexed by id.
pub fn analytic_gradients(store: &ParamStore, loss: &impl Fn(&Graph) -> Result<Var>) -> Result<Vec<Option<Tensor>>> {
    let g = Graph::new(store);
    let l = loss(&g)?;
    if g.shape(l) != (1, 1) {
        return Err(Error::Shape(format!("loss of shape {:?}", g.shape(l))));
    }
    let mut grads = vec![None; store.len()];
    g.backward(l).accumulate_into(&mut grads, 1.0);
    Ok(grads)
}

/// Compares `analytic` against central differences of `loss`. Frozen
/// tensors are skipped; a trainable tensor without a gradient counts as zero.
pub fn compare_gradients(
    store: &ParamStore,
    analytic: &[Option<Tensor>],
    loss: impl Fn(&Graph) -> Result<Var>,
    opts: GradCheckOptions,
) -> Result<GradReport> {
    if analytic.len() != store.len() {
        return Err(Error::Shape(format!("{} gradients for {} tensors", analytic.len(), store.len())));
    }
    let floor = opts.floor * loss_value(store, &loss)?.abs().max(1.0);
    let mut work = store.clone();
    let mut r = rng::stream(opts.seed, 77);
    let mut tensors = Vec::new();
    for id in store.ids().filter(|&id| !store.is_frozen(id)) {
        let size = store.get(id).len();
        let entries: Vec<usize> = match opts.per_tensor {
            Some(k) if k < size => {
                let mut e = sample(&mut r, size, k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..size).collect(),
        };
        let mut check = TensorCheck { name: store.name(id).to_string(), checked: entries.len(), max_rel_err: 0.0, max_abs_err: 0.0, worst: 0 };
        for &e in &entries {
            let base = store.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = base + opts.step;
            let up = loss_value(&work, &loss)?;
            work.get_mut(id).data_mut()[e] = base - opts.step;
            let down = loss_value(&work, &loss)?;
            work.get_mut(id).data_mut()[e] = base;
            let numeric = (up - down) / (2.0 * opts.step);
            let exact = analytic[id.0].as_ref().map_or(0.0, |g| g.data()[e]);
            let abs = (numeric - exact).abs();
            let rel = abs / numeric.abs().max(exact.abs()).max(floor);
            check.max_abs_err = check.max_abs_err.max(abs);
            if !(rel <= check.max_rel_err) {
                check.max_rel_err = rel;
                check.worst = e;
            }
        }
        tensors.push(check);
    }
    Ok(GradReport { tol: opts.tol, tensors })
}

/// Checks the analytic gradient of `loss` against central differences.
pub fn grad_check(store: &ParamStore, loss: impl Fn(&Graph) -> Result<Var>, opts: GradCheckOptions) -> Result<GradReport> {
    let analytic = analytic_gradients(store, &loss)?;
    compare_gradients(store, &analytic, loss, opts)
}

/// Noise loss at a fixed step and noise draw plus the hypothesis loss, for
/// one sample. With the control branch attached the sample's latent is used.
pub fn check_model(model: &Model, sample: &Sample, t: usize, opts: GradCheckOptions) -> Result<GradReport> {
    let mut r = rng::stream(opts.seed, 78);
    let eps = rng::normal_tensor(&mut r, sample.canonical.rows(), 3);
    let xt = forward_sample(&sample.canonical, t, &eps, &model.schedule)?;
    let cond = match model.is_refining() {
        true => sample.cond.with_latent(Some(compute_condition_latent(&sample.observed, &sample.cond.prior, model)?)),
        false => sample.cond.clone(),
    };
    let loss = |g: &Graph| -> Result<Var> {
        let pred = model.predict_noise(g, &xt, t, &cond)?;
        let noise = noise_penalty(g, g.constant(eps.clone()), pred, LossNorm::Squared);
        Ok(g.add(noise, pose_loss(model, g, sample, &cond)?))
    };
    grad_check(&model.store, loss, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::nn::{Builder, Linear};

    fn linear_case() -> (ParamStore, Linear, Tensor) {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(4);
        let layer = Linear::new(&mut Builder::new(&mut store, &mut r), "lin", 5, 3);
        let x = rng::normal_tensor(&mut r, 7, 5);
        (store, layer, x)
    }

    #[test]
    fn linear_layer_is_exact() {
        let (store, layer, x) = linear_case();
        let c = rng::normal_tensor(&mut rng::seeded(9), 7, 3);
        let loss = |g: &Graph| Ok(g.sum_all(g.mul(layer.forward(g, g.constant(x.clone())), g.constant(c.clone()))));
        let report = grad_check(&store, loss, GradCheckOptions::default()).unwrap();
        assert_eq!(report.tensors.len(), 2);
        assert!(report.max_rel_err() <= 1e-8, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let (store, layer, x) = linear_case();
        let loss = |g: &Graph| Ok(g.sum_all(g.square(layer.forward(g, g.constant(x.clone())))));
        let mut grads = analytic_gradients(&store, &loss).unwrap();
        let w = store.find("lin.w").unwrap();
        grads[w.0].as_mut().unwrap().data_mut()[6] *= 1.01;
        let report = compare_gradients(&store, &grads, loss, GradCheckOptions::default()).unwrap();
        let failed: Vec<&str> = report.failures().iter().map(|t| t.name.as_str()).collect();
        assert_eq!(failed, ["lin.w"]);
        assert_eq!(report.failures()[0].worst, 6);
    }

    #[test]
    fn frozen_tensors_are_skipped_and_subsets_respected() {
        let (mut store, layer, x) = linear_case();
        store.set_frozen(store.find("lin.b").unwrap(), true);
        let loss = |g: &Graph| Ok(g.sum_all(g.square(layer.forward(g, g.constant(x.clone())))));
        let opts = GradCheckOptions { per_tensor: Some(4), ..GradCheckOptions::default() };
        let report = grad_check(&store, loss, opts).unwrap();
        assert_eq!(report.tensors.len(), 1);
        assert_eq!(report.tensors[0].checked, 4);
        assert!(report.passed());
    }
}
