//! Multi-temporal masked autoencoder for multispectral satellite chips.
//!
//! The crate covers the model side: 3D patch embedding, factorised
//! sinusoidal positional encodings, the geotemporal metadata bias, the
//! encoder/decoder pair with its masked reconstruction loss, fine-tuning
//! heads, and a deterministic training loop with checkpointing.

pub mod autograd;
pub mod checkpoint;
pub mod chip;
pub mod data;
pub mod error;
pub mod finetune;
pub mod heads;
pub mod mae;
pub mod nn;
pub mod optim;
pub mod patchify;
pub mod posenc;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
