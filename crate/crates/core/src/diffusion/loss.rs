//! Noise-prediction objectives for the pretrain and refine phases.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

use super::process::forward_sample;
use super::schedule::DiffusionSchedule;

/// Per-point penalty on `ε − ε̂`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    /// `Σ_i ‖ε_i − ε̂_i‖²`.
    #[default]
    Squared,
    /// `Σ_i ‖ε_i − ε̂_i‖`, smoothed at zero by `1e-12` under the root.
    Unsquared,
}

/// The timestep and noise drawn for one sample.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Tensor,
}

/// Draws `t ~ Uniform{1..T}` then `ε ~ N(0, I)` with the shape of `x0`.
pub fn draw_noise(x0: &Tensor, sched: &DiffusionSchedule, rng: &mut Rng) -> NoiseDraw {
    let t = rng.gen_range(1..=sched.steps());
    let eps = rng::normal_tensor(rng, x0.rows(), x0.cols());
    NoiseDraw { t, eps }
}

pub fn noise_penalty(g: &Graph, eps: Var, pred: Var, norm: LossNorm) -> Var {
    let diff = g.sub(eps, pred);
    let sq = g.square(diff);
    match norm {
        LossNorm::Squared => g.sum_all(sq),
        LossNorm::Unsquared => {
            let ones = g.constant(Tensor::full(g.shape(sq).1, 1, 1.0));
            let per_point = g.matmul(sq, ones);
            let smoothed = g.add_row(per_point, g.constant(Tensor::scalar(1e-12)));
            g.sum_all(g.sqrt(smoothed))
        }
    }
}

/// Summed loss over a batch with parameter gradients indexed by parameter id.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub per_sample: Vec<f64>,
    pub draws: Vec<NoiseDraw>,
    pub grads: Vec<Option<Tensor>>,
}

impl LossOutput {
    pub fn points(&self) -> usize {
        self.draws.iter().map(|d| d.eps.rows()).sum()
    }
}

/// The denoising objective over a batch of clean shapes.
///
/// `eps_fn(g, sample, x_t, t)` returns the predicted noise for sample
/// `sample`; anything it conditions on (prior cloud, latent) is captured by
/// the closure. Every sample gets its own tape, and gradients are summed in
/// sample order.
pub fn loss_pretrain<F>(
    store: &ParamStore,
    x0s: &[Tensor],
    sched: &DiffusionSchedule,
    rng: &mut Rng,
    norm: LossNorm,
    eps_fn: F,
) -> Result<LossOutput>
where
    F: Fn(&Graph<'_>, usize, Var, usize) -> Result<Var>,
{
    let draws: Vec<NoiseDraw> = x0s.iter().map(|x| draw_noise(x, sched, rng)).collect();
    loss_with_draws(store, x0s, draws, sched, norm, eps_fn)
}

/// Same objective with the conditioning branch active. Which parameters
/// learn is decided by the frozen set of `store`.
pub fn loss_refine<F>(
    store: &ParamStore,
    x0s: &[Tensor],
    sched: &DiffusionSchedule,
    rng: &mut Rng,
    norm: LossNorm,
    eps_fn: F,
) -> Result<LossOutput>
where
    F: Fn(&Graph<'_>, usize, Var, usize) -> Result<Var>,
{
    loss_pretrain(store, x0s, sched, rng, norm, eps_fn)
}

/// The objective for fixed draws, e.g. to compare two models on identical noise.
pub fn loss_with_draws<F>(
    store: &ParamStore,
    x0s: &[Tensor],
    draws: Vec<NoiseDraw>,
    sched: &DiffusionSchedule,
    norm: LossNorm,
    eps_fn: F,
) -> Result<LossOutput>
where
    F: Fn(&Graph<'_>, usize, Var, usize) -> Result<Var>,
{
    if x0s.is_empty() {
        return Err(Error::Empty("loss batch".into()));
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; store.len()];
    let mut per_sample = Vec::with_capacity(x0s.len());
    for (i, (x0, draw)) in x0s.iter().zip(&draws).enumerate() {
        let xt = forward_sample(x0, draw.t, &draw.eps, sched)?;
        let g = Graph::new(store);
        let xt = g.constant(xt);
        let pred = eps_fn(&g, i, xt, draw.t)?;
        if g.shape(pred) != draw.eps.shape() {
            return Err(Error::Shape(format!(
                "denoiser returned {:?} for noise of shape {:?}",
                g.shape(pred),
                draw.eps.shape()
            )));
        }
        let eps = g.constant(draw.eps.clone());
        let loss = noise_penalty(&g, eps, pred, norm);
        let value = g.value(loss).get(0, 0);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss of sample {i}")));
        }
        g.backward(loss).accumulate_into(&mut grads, 1.0);
        per_sample.push(value);
    }
    Ok(LossOutput { loss: per_sample.iter().sum(), per_sample, draws, grads })
}

#[cfg(test)]
mod tests {
    use super::super::schedule::make_schedule;
    use super::*;
    use crate::autograd::ParamId;

    fn batch() -> Vec<Tensor> {
        let mut r = rng::seeded(3);
        (0..3).map(|_| rng::uniform_tensor(&mut r, 5, 3, -1.0, 1.0)).collect()
    }

    #[test]
    fn oracle_denoiser_has_zero_loss() {
        let s = make_schedule(20, 1e-4, 0.05).unwrap();
        let x0s = batch();
        let store = ParamStore::new();
        let out = loss_pretrain(&store, &x0s, &s, &mut rng::seeded(1), LossNorm::Squared, |g, i, xt, t| {
            let ab = s.alpha_bar(t);
            let clean = g.constant(x0s[i].map(|v| v * ab.sqrt()));
            Ok(g.scale(g.sub(xt, clean), 1.0 / (1.0 - ab).sqrt()))
        })
        .unwrap();
        assert!(out.loss < 1e-20, "{}", out.loss);
    }

    #[test]
    fn zero_denoiser_loss_is_noise_energy() {
        let s = make_schedule(20, 1e-4, 0.05).unwrap();
        let x0s = batch();
        let store = ParamStore::new();
        for norm in [LossNorm::Squared, LossNorm::Unsquared] {
            let out = loss_pretrain(&store, &x0s, &s, &mut rng::seeded(2), norm, |g, _, xt, _| {
                let (r, c) = g.shape(xt);
                Ok(g.constant(Tensor::zeros(r, c)))
            })
            .unwrap();
            let mut r = rng::seeded(2);
            let mut direct = 0.0;
            for x in &x0s {
                let d = draw_noise(x, &s, &mut r);
                for p in 0..d.eps.rows() {
                    let sq: f64 = d.eps.row(p).iter().map(|v| v * v).sum();
                    direct += match norm {
                        LossNorm::Squared => sq,
                        LossNorm::Unsquared => (sq + 1e-12).sqrt(),
                    };
                }
            }
            assert!((out.loss - direct).abs() < 1e-10 * direct);
        }
    }

    fn toy(store: &mut ParamStore) -> (ParamId, ParamId) {
        let a = store.add("a", Tensor::scalar(0.4));
        let b = store.add("b", Tensor::scalar(-0.2));
        (a, b)
    }

    fn toy_eps(a: ParamId, b: ParamId) -> impl Fn(&Graph<'_>, usize, Var, usize) -> Result<Var> {
        move |g, _, xt, t| {
            let (r, c) = g.shape(xt);
            let col = g.reshape(xt, r * c, 1);
            let y = g.add_row(g.matmul(col, g.param(a)), g.param(b));
            let y = g.scale(y, 1.0 + 0.01 * t as f64);
            Ok(g.reshape(y, r, c))
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let s = make_schedule(20, 1e-4, 0.05).unwrap();
        let x0s = batch();
        for norm in [LossNorm::Squared, LossNorm::Unsquared] {
            let mut store = ParamStore::new();
            let (a, b) = toy(&mut store);
            let eval = |store: &ParamStore| {
                loss_pretrain(store, &x0s, &s, &mut rng::seeded(4), norm, toy_eps(a, b)).unwrap()
            };
            let out = eval(&store);
            for id in [a, b] {
                let analytic = out.grads[id.index()].as_ref().unwrap().get(0, 0);
                let h = 1e-5;
                let base = store.get(id).get(0, 0);
                store.get_mut(id).set(0, 0, base + h);
                let up = eval(&store).loss;
                store.get_mut(id).set(0, 0, base - h);
                let down = eval(&store).loss;
                store.get_mut(id).set(0, 0, base);
                let numeric = (up - down) / (2.0 * h);
                let rel = (analytic - numeric).abs() / numeric.abs().max(1e-8);
                assert!(rel < 1e-4, "{norm:?}: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let s = make_schedule(20, 1e-4, 0.05).unwrap();
        let mut store = ParamStore::new();
        let (a, b) = toy(&mut store);
        store.set_frozen(a, true);
        let out = loss_refine(&store, &batch(), &s, &mut rng::seeded(4), LossNorm::Squared, toy_eps(a, b)).unwrap();
        assert!(out.grads[a.index()].is_none());
        assert!(out.grads[b.index()].is_some());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let s = make_schedule(20, 1e-4, 0.05).unwrap();
        let store = ParamStore::new();
        let err = loss_pretrain(&store, &batch(), &s, &mut rng::seeded(0), LossNorm::Squared, |g, _, _, _| {
            Ok(g.constant(Tensor::zeros(1, 3)))
        });
        assert!(err.is_err());
    }
}
