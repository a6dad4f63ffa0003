//! Multimodal classification over frozen image and text embeddings.
//!
//! Image and text embeddings are fused by guided cross-attention gating,
//! optionally refined with differential attention, and classified by a
//! linear head. The crate also ships the training loop, evaluation metrics,
//! the `MMEB` embedding-file format and synthetic dataset generators.

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod train;

mod fsutil;

pub use error::{Error, FormatError, Result};
