//! Weakly-supervised fine-grained temporal action detection.
//!
//! Trains a clip-level detector from video-level labels only: a MIL
//! classifier over encoded clip features, self-supervised clustering
//! that discovers atomic-action visual concepts, concept composition
//! into fine and coarse action representations, and a two-step
//! inference/evaluation stack (temporal IoU, per-class AP, mAP grids).
//!
//! All numeric code is generic over the [`scalar::Scalar`] type;
//! training runs in `f32`, gradient verification in `f64`.

pub mod check;
pub mod checkpoint;
pub mod clustering;
pub mod concepts;
pub mod dataset;
pub mod detect;
pub mod error;
pub mod model;
pub mod optim;
pub mod trainer;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = tensor::Tensor<f64>;
