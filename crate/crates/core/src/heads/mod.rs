//! Hypothesis decoders and best-hypothesis selection.

pub mod hypotheses;
pub mod select;

pub use hypotheses::{compose_hypotheses, Frame, HypothesisSet, PoseHead, SizeHead};
pub use select::{select_best, Selection, SelectionRecord};
