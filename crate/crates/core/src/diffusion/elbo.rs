//! Closed-form and Monte-Carlo evaluation of the variational bound on
//! Gaussian toys.
//!
//! The reverse model here is affine with isotropic variance,
//! `p(x_{t-1} | x_t) = N(a_t x_t + b_t, v_t I)` and `p(x_T) = N(0, I)`, so every
//! term of the bound and the exact marginal `p(x_0)` have closed forms. This is
//! a verification harness; training uses the losses in `loss`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

use super::schedule::DiffusionSchedule;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn positive(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} variance must be positive, got {v}")))
    }
}

/// `KL(N(mu_q, var_q I) ‖ N(mu_p, var_p I))`.
pub fn gaussian_kl(mu_q: &[f64], var_q: f64, mu_p: &[f64], var_p: f64) -> Result<f64> {
    positive(var_q, "first")?;
    positive(var_p, "second")?;
    if mu_q.len() != mu_p.len() {
        return Err(Error::Shape(format!("KL means of length {} and {}", mu_q.len(), mu_p.len())));
    }
    let d = mu_q.len() as f64;
    Ok(0.5 * (d * var_q / var_p + sq_dist(mu_q, mu_p) / var_p - d + d * (var_p / var_q).ln()))
}

/// `log N(x; mean, var I)`.
pub fn log_normal(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let d = x.len() as f64;
    -0.5 * d * (2.0 * PI * var).ln() - sq_dist(x, mean) / (2.0 * var)
}

#[derive(Clone, Debug)]
pub struct AffineReverse {
    a: Vec<f64>,
    b: Vec<Vec<f64>>,
    v: Vec<f64>,
}

impl AffineReverse {
    /// Coefficients for `t = 1..=T`, stored at index `t - 1`.
    pub fn new(a: Vec<f64>, b: Vec<Vec<f64>>, v: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() || a.len() != v.len() || a.is_empty() {
            return Err(Error::Shape("reverse model coefficient lengths differ".into()));
        }
        let dim = b[0].len();
        if b.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("reverse model offsets differ in length".into()));
        }
        for &x in &v {
            positive(x, "reverse step")?;
        }
        Ok(Self { a, b, v })
    }

    /// The reverse model induced by a noise predictor `ε̂(x_t) = k_t x_t + e`
    /// through the ancestral update, with variance `β_t`.
    pub fn from_linear_eps(sched: &DiffusionSchedule, k: &[f64], e: &[f64]) -> Result<Self> {
        let steps = sched.steps();
        if k.len() != steps {
            return Err(Error::Shape(format!("{} slopes for {steps} steps", k.len())));
        }
        let mut a = Vec::with_capacity(steps);
        let mut b = Vec::with_capacity(steps);
        for t in 1..=steps {
            let inv = 1.0 / sched.alpha(t).sqrt();
            let c = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
            a.push(inv * (1.0 - c * k[t - 1]));
            b.push(e.iter().map(|v| -inv * c * v).collect());
        }
        Self::new(a, b, sched.betas().to_vec())
    }

    pub fn steps(&self) -> usize {
        self.a.len()
    }

    pub fn dim(&self) -> usize {
        self.b[0].len()
    }

    pub fn mean(&self, t: usize, x: &[f64]) -> Vec<f64> {
        let a = self.a[t - 1];
        x.iter().zip(&self.b[t - 1]).map(|(x, b)| a * x + b).collect()
    }

    pub fn variance(&self, t: usize) -> f64 {
        self.v[t - 1]
    }

    /// `-log p(x_0)` under the exact Gaussian marginal.
    pub fn exact_nll(&self, x0: &[f64]) -> f64 {
        let mut mean = vec![0.0; self.dim()];
        let mut var = 1.0;
        for t in (1..=self.steps()).rev() {
            mean = self.mean(t, &mean);
            var = self.a[t - 1] * self.a[t - 1] * var + self.v[t - 1];
        }
        -log_normal(x0, &mean, var)
    }
}

/// The three groups of terms of the bound for one clean point set.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboTerms {
    /// `L_{t-1}` for `t = 2..=T`, in that order.
    pub transitions: Vec<f64>,
    /// `L_T`.
    pub prior: f64,
    /// `L_0`, the expected negative reconstruction log-likelihood.
    pub reconstruction: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.prior + self.transitions.iter().sum::<f64>() + self.reconstruction
    }
}

fn check_model(x0: &[f64], sched: &DiffusionSchedule, model: &AffineReverse) -> Result<()> {
    if model.steps() != sched.steps() || model.dim() != x0.len() {
        return Err(Error::Shape(format!(
            "reverse model has {} steps of width {}, expected {} of width {}",
            model.steps(),
            model.dim(),
            sched.steps(),
            x0.len()
        )));
    }
    Ok(())
}

/// Closed-form bound terms, taking expectations over `q(x_t | x_0)` analytically.
pub fn elbo_terms(x0: &[f64], sched: &DiffusionSchedule, model: &AffineReverse) -> Result<ElboTerms> {
    check_model(x0, sched, model)?;
    let d = x0.len() as f64;
    let steps = sched.steps();

    let ab_t = sched.alpha_bar(steps);
    let q_mean: Vec<f64> = x0.iter().map(|v| ab_t.sqrt() * v).collect();
    let prior = gaussian_kl(&q_mean, 1.0 - ab_t, &vec![0.0; x0.len()], 1.0)?;

    let mut transitions = Vec::with_capacity(steps - 1);
    for t in 2..=steps {
        let ab = sched.alpha_bar(t);
        let (c0, c1) = sched.posterior_mean_coefs(t);
        let post_var = sched.posterior_variance(t);
        let a = model.a[t - 1];
        let v = model.v[t - 1];
        positive(post_var, "posterior")?;
        // μ̃ − a·x_t − b is Gaussian in x_t with this mean and per-coordinate variance
        let gap_mean_sq: f64 = x0
            .iter()
            .zip(&model.b[t - 1])
            .map(|(x, b)| {
                let m = c0 * x + (c1 - a) * ab.sqrt() * x - b;
                m * m
            })
            .sum();
        let gap_sq = gap_mean_sq + d * (c1 - a) * (c1 - a) * (1.0 - ab);
        transitions.push(0.5 * (d * post_var / v + gap_sq / v - d + d * (v / post_var).ln()));
    }

    let ab1 = sched.alpha_bar(1);
    let a1 = model.a[0];
    let v1 = model.v[0];
    let resid_mean_sq: f64 = x0
        .iter()
        .zip(&model.b[0])
        .map(|(x, b)| {
            let m = (1.0 - a1 * ab1.sqrt()) * x - b;
            m * m
        })
        .sum();
    let resid_sq = resid_mean_sq + d * a1 * a1 * (1.0 - ab1);
    let reconstruction = 0.5 * d * (2.0 * PI * v1).ln() + resid_sq / (2.0 * v1);

    Ok(ElboTerms { transitions, prior, reconstruction })
}

/// `[x_0, x_1, …, x_T]` drawn step by step from the forward kernels.
pub fn sample_forward_trajectory(x0: &[f64], sched: &DiffusionSchedule, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut traj = Vec::with_capacity(sched.steps() + 1);
    traj.push(x0.to_vec());
    for t in 1..=sched.steps() {
        let (ra, rb) = (sched.alpha(t).sqrt(), sched.beta(t).sqrt());
        let next = traj[t - 1].iter().map(|x| ra * x + rb * rng::normal(rng)).collect();
        traj.push(next);
    }
    traj
}

fn log_q_step(traj: &[Vec<f64>], sched: &DiffusionSchedule, t: usize) -> f64 {
    let ra = sched.alpha(t).sqrt();
    let mean: Vec<f64> = traj[t - 1].iter().map(|x| ra * x).collect();
    log_normal(&traj[t], &mean, sched.beta(t))
}

fn log_q_marginal(traj: &[Vec<f64>], sched: &DiffusionSchedule, t: usize) -> f64 {
    let ab = sched.alpha_bar(t);
    let mean: Vec<f64> = traj[0].iter().map(|x| ab.sqrt() * x).collect();
    log_normal(&traj[t], &mean, 1.0 - ab)
}

fn log_q_posterior(traj: &[Vec<f64>], sched: &DiffusionSchedule, t: usize) -> f64 {
    let (c0, c1) = sched.posterior_mean_coefs(t);
    let mean: Vec<f64> = traj[0].iter().zip(&traj[t]).map(|(a, b)| c0 * a + c1 * b).collect();
    log_normal(&traj[t - 1], &mean, sched.posterior_variance(t))
}

fn log_p_step(traj: &[Vec<f64>], model: &AffineReverse, t: usize) -> f64 {
    log_normal(&traj[t - 1], &model.mean(t, &traj[t]), model.variance(t))
}

fn log_p_prior(traj: &[Vec<f64>]) -> f64 {
    let last = traj.last().expect("trajectory is never empty");
    log_normal(last, &vec![0.0; last.len()], 1.0)
}

/// `log q(x_{1:T} | x_0) − log p(x_{0:T})` for one trajectory.
pub fn trajectory_integrand(traj: &[Vec<f64>], sched: &DiffusionSchedule, model: &AffineReverse) -> f64 {
    let steps = sched.steps();
    let log_q: f64 = (1..=steps).map(|t| log_q_step(traj, sched, t)).sum();
    let log_p: f64 = log_p_prior(traj) + (1..=steps).map(|t| log_p_step(traj, model, t)).sum::<f64>();
    log_q - log_p
}

/// The integrand rewritten five ways, from the per-step ratio form through
/// the split of the first step, the Bayes rewrite of each forward kernel and
/// the telescoped marginals, to the form whose expectation is the sum of the
/// bound terms. All five agree for every trajectory.
pub fn rewriting_chain(traj: &[Vec<f64>], sched: &DiffusionSchedule, model: &AffineReverse) -> [f64; 5] {
    let steps = sched.steps();
    let prior = -log_p_prior(traj);
    let ratio = |t: usize| log_q_step(traj, sched, t) - log_p_step(traj, model, t);
    let first = ratio(1);

    let per_step = prior + (1..=steps).map(ratio).sum::<f64>();
    let split = prior + (2..=steps).map(ratio).sum::<f64>() + first;
    let bayes = prior
        + (2..=steps)
            .map(|t| {
                log_q_posterior(traj, sched, t) - log_p_step(traj, model, t) + log_q_marginal(traj, sched, t)
                    - log_q_marginal(traj, sched, t - 1)
            })
            .sum::<f64>()
        + first;
    let posterior_terms: f64 =
        (2..=steps).map(|t| log_q_posterior(traj, sched, t) - log_p_step(traj, model, t)).sum();
    let telescoped = prior + posterior_terms + log_q_marginal(traj, sched, steps) - log_q_marginal(traj, sched, 1)
        + first;
    let grouped =
        (log_q_marginal(traj, sched, steps) + prior) + posterior_terms - log_p_step(traj, model, 1);
    [per_step, split, bayes, telescoped, grouped]
}

/// Sample mean and its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        Self { mean, std_error: (var / n).sqrt() }
    }

    /// Whether `value` lies within `k` standard errors of the mean.
    pub fn covers(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.std_error
    }
}

/// Monte-Carlo estimate of the bound from `samples` forward trajectories.
pub fn monte_carlo_elbo(
    x0: &[f64],
    sched: &DiffusionSchedule,
    model: &AffineReverse,
    samples: usize,
    rng: &mut Rng,
) -> Result<Estimate> {
    check_model(x0, sched, model)?;
    if samples < 2 {
        return Err(Error::InvalidArgument("Monte-Carlo estimate needs at least 2 samples".into()));
    }
    let xs: Vec<f64> = (0..samples)
        .map(|_| trajectory_integrand(&sample_forward_trajectory(x0, sched, rng), sched, model))
        .collect();
    Ok(Estimate::from_samples(&xs))
}

#[cfg(test)]
mod tests {
    use super::super::schedule::make_schedule;
    use super::*;

    fn model(sched: &DiffusionSchedule, dim: usize) -> AffineReverse {
        let k: Vec<f64> = (0..sched.steps()).map(|i| 0.3 + 0.02 * i as f64).collect();
        let e: Vec<f64> = (0..dim).map(|i| 0.1 * i as f64 - 0.05).collect();
        AffineReverse::from_linear_eps(sched, &k, &e).unwrap()
    }

    #[test]
    fn kl_hand_values() {
        assert_eq!(gaussian_kl(&[0.5, -1.0], 2.0, &[0.5, -1.0], 2.0).unwrap(), 0.0);
        let per_dim = 0.5 * (4.0 + 1.0 - 1.0 - 4f64.ln());
        assert!((per_dim - 1.3068528194400546).abs() < 1e-15);
        let kl = gaussian_kl(&[1.0, 1.0, 1.0], 4.0, &[0.0; 3], 1.0).unwrap();
        assert!((kl - 3.0 * per_dim).abs() < 1e-14);
        assert!(gaussian_kl(&[0.0], 0.0, &[0.0], 1.0).is_err());
        assert!(gaussian_kl(&[0.0], 1.0, &[0.0], -1.0).is_err());
        assert!(AffineReverse::new(vec![1.0], vec![vec![0.0]], vec![0.0]).is_err());
    }

    #[test]
    fn rewriting_chain_is_exact_per_trajectory() {
        let s = make_schedule(10, 1e-3, 0.2).unwrap();
        let x0 = [0.4, -0.8, 1.1];
        let m = model(&s, 3);
        let mut r = rng::seeded(9);
        for _ in 0..50 {
            let traj = sample_forward_trajectory(&x0, &s, &mut r);
            let chain = rewriting_chain(&traj, &s, &m);
            let direct = trajectory_integrand(&traj, &s, &m);
            for v in chain {
                assert!((v - direct).abs() <= 1e-9 * direct.abs().max(1.0), "{chain:?} vs {direct}");
            }
        }
    }

    #[test]
    fn bound_sits_above_exact_nll() {
        let s = make_schedule(10, 1e-3, 0.2).unwrap();
        let x0 = [0.4, -0.8, 1.1];
        let m = model(&s, 3);
        let terms = elbo_terms(&x0, &s, &m).unwrap();
        assert_eq!(terms.transitions.len(), 9);
        assert!(terms.transitions.iter().all(|&v| v >= 0.0) && terms.prior >= 0.0);
        assert!(m.exact_nll(&x0) <= terms.total());
    }

    #[test]
    fn monte_carlo_matches_closed_form() {
        let s = make_schedule(10, 1e-3, 0.2).unwrap();
        let x0 = [0.4, -0.8, 1.1];
        let m = model(&s, 3);
        let closed = elbo_terms(&x0, &s, &m).unwrap().total();
        let est = monte_carlo_elbo(&x0, &s, &m, 20_000, &mut rng::seeded(1)).unwrap();
        assert!(est.covers(closed, 3.0), "{est:?} vs {closed}");
    }
}
