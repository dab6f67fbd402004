//! Network assembly, two-phase training, inference and gradient checking.

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod gradcheck;
pub mod infer;
pub mod model;
pub mod train;

pub use config::{Config, ModelConfig, TrainConfig};
pub use model::{compute_condition_latent, Conditioning, Model};
pub use infer::{evaluate, infer, Inference};
pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, Phase, RunRecorder};
pub use gradcheck::{check_model, grad_check, GradCheckOptions, GradReport};
