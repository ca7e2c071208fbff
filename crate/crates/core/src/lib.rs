//! Gated axial-attention segmentation on a small reverse-mode autodiff core.
//!
//! - [`autodiff`] / [`tensor`]: f64 tensors and the gradient tape
//! - [`attention`]: dense, axial and gated axial attention with relative positions
//! - [`segmodel`]: the segmentation network and its JSON checkpoints
//! - [`data`]: synthetic lesion images and PGM datasets
//! - [`training`], [`gradcheck`], [`metrics`], [`bench`]

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod params;
pub mod segmodel;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
