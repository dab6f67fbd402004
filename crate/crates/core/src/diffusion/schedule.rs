//! Linear noise schedules and the quantities derived from them.
//!
//! Timesteps are 1-based throughout: `t = 1` is the least noisy step and
//! `t = T` the last. `alpha_bar(0)` is defined as 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// The serialized form of a schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta1: f64,
    #[serde(rename = "betaT")]
    pub beta_last: f64,
    #[serde(default)]
    pub kind: ScheduleKind,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { steps: 100, beta1: 1e-4, beta_last: 0.05, kind: ScheduleKind::Linear }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct DiffusionSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta1: f64, beta_last: f64) -> Result<DiffusionSchedule> {
    DiffusionSchedule::new(ScheduleSpec { steps, beta1, beta_last, kind: ScheduleKind::Linear })
}

impl DiffusionSchedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        let ScheduleSpec { steps, beta1, beta_last, .. } = spec;
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(beta1 > 0.0 && beta1 <= beta_last && beta_last < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 < beta1 <= betaT < 1, got beta1 = {beta1}, betaT = {beta_last}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta1 + (beta_last - beta1) * i as f64 / (steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
            })
            .collect();
        Ok(Self { spec, betas, alphas, alpha_bars, sigmas })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Multiplier of the fresh noise in a reverse step.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    /// Variance of the forward posterior `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    /// `(c0, c1)` with posterior mean `c0 · x_0 + c1 · x_t`.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        let denom = 1.0 - self.alpha_bar(t);
        let c0 = self.alpha_bar(t - 1).sqrt() * self.beta(t) / denom;
        let c1 = self.alpha(t).sqrt() * (1.0 - self.alpha_bar(t - 1)) / denom;
        (c0, c1)
    }
}

impl TryFrom<ScheduleSpec> for DiffusionSchedule {
    type Error = Error;

    fn try_from(spec: ScheduleSpec) -> Result<Self> {
        Self::new(spec)
    }
}

impl From<DiffusionSchedule> for ScheduleSpec {
    fn from(s: DiffusionSchedule) -> Self {
        s.spec
    }
}
