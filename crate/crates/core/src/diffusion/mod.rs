//! Prior-conditioned point diffusion: schedules, forward corruption, reverse
//! sampling, timestep features, training objectives and a bound-checking
//! harness for Gaussian toys.

pub mod elbo;
pub mod embedding;
pub mod loss;
pub mod process;
pub mod schedule;

pub use embedding::{temporal_embedding_raw, TimeEmbedding};
pub use loss::{loss_pretrain, loss_refine, LossNorm, LossOutput};
pub use process::{forward_sample, reverse_step, sample_shape, NoisyState};
pub use schedule::{make_schedule, DiffusionSchedule, ScheduleSpec};
