//! Patch-based self-attention networks for 3-D medical image segmentation:
//! a small reverse-mode autodiff engine, the network, its training loop,
//! sliding-window inference, evaluation metrics and an experiment harness.

pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
