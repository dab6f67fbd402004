//! Synthetic benchmark data, box IoU and accuracy reporting.

pub mod iou;
pub mod metrics;
pub mod report;
pub mod synth;

pub use iou::{iou3d, OrientedBox};
pub use metrics::{accuracy_at, pose_error, summarize, EvalRecord, Summary, Symmetry};
pub use synth::{generate, read_dataset, write_dataset, Category, Dataset, Instance, Split, SynthSpec};
