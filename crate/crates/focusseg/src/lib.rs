//! Region-focused semantic segmentation at desk scale.
//!
//! The crate builds a small encoder-decoder segmentation model around one
//! mechanism: a learned importance map selects the hardest spatial locations,
//! a Top-K rule binarizes the selection, and several dilated convolution
//! branches reason only over the selected regions. Everything runs on f64
//! tensors with from-scratch reverse-mode differentiation so that gradient
//! checks, not faith, validate the kernels. A sparse execution engine turns
//! the Top-K mask into actual FLOP savings at inference time.
//!
//! Start with the runnable examples (`cargo run --example ...`) or the
//! `focusseg` binary for the command-line pipeline.

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod focus;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sparse;
pub mod supervision;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
