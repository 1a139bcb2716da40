//! Fuses a frozen classifier's logits with latent codes distilled from its
//! own attribution maps, so that explanation structure learned at training
//! time improves predictions at inference time without recomputing
//! attributions.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`util`], [`container`]: dense tensors, seeded RNG streams,
//!   and the binary cache/checkpoint containers.
//! - [`data`]: datasets, the synthetic patch-pattern generator, IDX codec,
//!   stratified splits.
//! - [`nn`], [`model`]: the hand-rolled differentiable layers and the frozen
//!   convolutional base classifier built from them.
//! - [`attribution`]: exact Shapley, KernelSHAP, integrated gradients and
//!   gradient×input over grouped input features, with an on-disk cache.
//! - [`autoencoder`], [`encoder_decoder`], [`fusion`]: the two distillation
//!   strategies and the fusion head they feed.
//! - [`eval`], [`pipeline`]: metrics/reports and the run-directory
//!   orchestration used by the CLI.

pub mod attribution;
pub mod autoencoder;
pub mod container;
pub mod data;
pub mod encoder_decoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
pub use tensor::Tensor;
