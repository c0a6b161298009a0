//! Construction of a multi-temporal pretraining dataset from a tile catalog
//! and a per-scene quality index.
//!
//! [`pipeline::build_dataset`] runs the whole chain and
//! [`verify::verify`] checks its output.

pub mod catalog;
pub mod error;
pub mod patches;
pub mod pipeline;
pub mod select;
pub mod sequences;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
