//! Nucleus instance segmentation via boundary regression and structural
//! re-parameterization.
//!
//! The crate provides a small deterministic tensor engine, the
//! re-parameterization algebra (multi-branch training units fused into single
//! convolutions for inference), the encoder-decoder segmentation network, its
//! loss functions, the boundary-voting post-processor, panoptic evaluation
//! metrics, and a synthetic nucleus-image generator for desk-scale training.

pub mod error;
pub mod gradcheck;
pub mod groundtruth;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod postprocess;
pub mod reparam;
pub mod tensor;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
