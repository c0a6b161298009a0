//! Scores for classification, segmentation and regression, and the
//! evaluation protocol around them: a fixed-budget hyperparameter search,
//! seeded repeats, leave-one-year-out splits and a results registry.

pub mod error;
pub mod metrics;
pub mod protocol;
pub mod registry;

pub use error::{Error, Result};
