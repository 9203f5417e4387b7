//! Masked-autoencoder pretraining with a memory-bank contrastive objective
//! for tile images, with linear-probe and fine-tuning evaluation.
//!
//! Everything runs in `f64` with hand-written forward and backward passes.
//! Per-tile work inside a batch is spread over threads when the `parallel`
//! feature is on; results are bit-identical to the sequential path.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod membank;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod patching;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod training;

pub use config::RunConfig;
pub use error::{GcmaeError, Result};
pub use parallel::Execution;
pub use tensor::Matrix;
