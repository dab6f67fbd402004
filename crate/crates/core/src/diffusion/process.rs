//! Forward corruption and ancestral sampling of the moving point set.

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

use super::schedule::DiffusionSchedule;

/// One state of a reverse trajectory. The anchor is the prior cloud and is
/// never modified.
#[derive(Clone, Debug)]
pub struct NoisyState<'a> {
    pub moving: Tensor,
    pub anchor: &'a Tensor,
    pub t: usize,
}

fn check_pair(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `√ᾱ_t · x0 + √(1 − ᾱ_t) · eps`.
pub fn forward_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    check_pair(x0, eps, "forward_sample noise")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

/// One ancestral step from `x_t` to `x_{t-1}`. At `t = 1` the noise term is
/// dropped whatever `z` holds.
pub fn reverse_step(
    xt: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    z: Option<&Tensor>,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    sched.check_step(t)?;
    check_pair(xt, eps_pred, "reverse_step prediction")?;
    let inv = 1.0 / sched.alpha(t).sqrt();
    let k = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let mut out = xt.zip_map(eps_pred, |x, e| inv * (x - k * e));
    if let (Some(z), true) = (z, t > 1) {
        check_pair(xt, z, "reverse_step noise")?;
        let s = sched.sigma(t);
        for (o, n) in out.data_mut().iter_mut().zip(z.data()) {
            *o += s * n;
        }
    }
    Ok(out)
}

/// Runs the reverse chain from `x_T ~ N(0, I)` down to `x_0`, calling
/// `on_step` with every state including the first and the last.
///
/// Draw order is `x_T` first, then one `z` per step for `t = T..2`.
pub fn sample_trajectory<'a>(
    anchor: &'a Tensor,
    n: usize,
    sched: &DiffusionSchedule,
    rng: &mut Rng,
    mut denoiser: impl FnMut(&NoisyState<'a>) -> Result<Tensor>,
    mut on_step: impl FnMut(&NoisyState<'a>),
) -> Result<Tensor> {
    let steps = sched.steps();
    let mut state = NoisyState { moving: rng::normal_tensor(rng, n, 3), anchor, t: steps };
    on_step(&state);
    for t in (1..=steps).rev() {
        let eps = denoiser(&state)?;
        let z = (t > 1).then(|| rng::normal_tensor(rng, n, 3));
        let next = reverse_step(&state.moving, t, &eps, z.as_ref(), sched)?;
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("reverse step at t = {t}")));
        }
        state = NoisyState { moving: next, anchor, t: t - 1 };
        on_step(&state);
    }
    Ok(state.moving)
}

/// Samples an `n x 3` canonical shape with the prior `anchor` held fixed.
pub fn sample_shape<'a>(
    anchor: &'a Tensor,
    n: usize,
    sched: &DiffusionSchedule,
    rng: &mut Rng,
    denoiser: impl FnMut(&NoisyState<'a>) -> Result<Tensor>,
) -> Result<Tensor> {
    sample_trajectory(anchor, n, sched, rng, denoiser, |_| {})
}
