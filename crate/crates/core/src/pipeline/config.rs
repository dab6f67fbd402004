//! Model and training configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{LossNorm, ScheduleSpec};
use crate::error::{Error, Result};
use crate::geometry::group::GroupKind;
use crate::layers::ort::BlockConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width `d`.
    pub width: usize,
    pub heads: usize,
    pub group_width: usize,
    pub pose_hidden: usize,
    pub kernel_size: usize,
    pub k_seed: usize,
    pub max_neighbors: usize,
    pub sigma_ratio: f64,
    /// Width of the sinusoidal time features.
    pub time_width: usize,
    pub group: GroupKind,
    /// Noise schedule the denoiser is trained for.
    pub schedule: ScheduleSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 32,
            heads: 4,
            group_width: 8,
            pose_hidden: 32,
            kernel_size: 8,
            k_seed: 4,
            max_neighbors: 16,
            sigma_ratio: 0.5,
            time_width: 32,
            group: GroupKind::Icosahedral,
            schedule: ScheduleSpec { steps: 20, beta1: 1e-4, beta_last: 0.23, ..ScheduleSpec::default() },
        }
    }
}

impl ModelConfig {
    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            width: self.width,
            group_width: self.group_width,
            heads: self.heads,
            kernel_size: self.kernel_size,
            k_seed: self.k_seed,
            max_neighbors: self.max_neighbors,
            sigma_ratio: self.sigma_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block().validate()?;
        if self.pose_hidden == 0 || self.time_width == 0 || self.time_width % 2 != 0 {
            return Err(Error::InvalidArgument("pose width must be positive and time width even".into()));
        }
        crate::diffusion::DiffusionSchedule::new(self.schedule)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning-rate factor applied every `decay_epochs` epochs.
    pub decay: f64,
    pub decay_epochs: usize,
    pub batch: usize,
    pub pretrain_steps: usize,
    pub refine_steps: usize,
    pub seed: u64,
    pub loss_norm: LossNorm,
    /// Weight of the pose/size loss next to the noise loss.
    pub pose_weight: f64,
    pub clip_norm: f64,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            decay: 0.7,
            decay_epochs: 40,
            batch: 8,
            pretrain_steps: 1500,
            refine_steps: 1500,
            seed: 0,
            loss_norm: LossNorm::Squared,
            pose_weight: 1.0,
            clip_norm: 10.0,
            checkpoint_every: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidArgument(format!("lr {} must be positive and decay {} in (0, 1]", self.lr, self.decay)));
        }
        if self.decay_epochs == 0 || self.batch == 0 || self.log_every == 0 {
            return Err(Error::InvalidArgument("decay interval, batch and log interval must be positive".into()));
        }
        if !(self.pose_weight >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::InvalidArgument("pose weight and clip norm must be non-negative".into()));
        }
        Ok(())
    }

    /// Step-indexed learning rate: `lr · decay^⌊epoch / decay_epochs⌋`.
    pub fn lr_at(&self, step: usize, dataset_len: usize) -> f64 {
        let per_epoch = (dataset_len / self.batch).max(1);
        let epoch = step / per_epoch;
        self.lr * self.decay.powi((epoch / self.decay_epochs) as i32)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Config = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_decays_every_forty_epochs() {
        let c = TrainConfig { lr: 1e-3, batch: 8, ..TrainConfig::default() };
        // 96 instances, 12 steps per epoch
        assert_eq!(c.lr_at(0, 96), 1e-3);
        assert_eq!(c.lr_at(40 * 12 - 1, 96), 1e-3);
        assert!((c.lr_at(40 * 12, 96) - 0.7e-3).abs() < 1e-18);
        assert!((c.lr_at(80 * 12, 96) - 0.49e-3).abs() < 1e-15);
    }

    #[test]
    fn validation_and_hash() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(c.hash(), Config::default().hash());
        let mut other = Config::default();
        other.train.seed = 1;
        assert_ne!(c.hash(), other.hash());
        assert!(TrainConfig { decay: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(ModelConfig { width: 30, heads: 4, ..ModelConfig::default() }.validate().is_err());
        let back = Config::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(Config::from_json(r#"{"model":{"bogus":1}}"#).is_err());
    }
}
