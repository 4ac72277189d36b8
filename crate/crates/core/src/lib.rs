//! Inter-frame prediction laboratory.
//!
//! Implements a learned binary-motion codec (encoder / stochastic binarizer /
//! I-frame-conditioned decoder with 3D dynamic bit assignment) next to the
//! seven classical block-matching motion estimation algorithms it is measured
//! against, with a shared bitstream container and rate-distortion metrics.

pub mod autoenc;
pub mod bitstream;
pub mod block;
pub mod dba;
pub mod error;
pub mod metrics;
pub mod scalar;
pub mod tensor;
pub mod video;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Shape5, Tensor5};

/// Working-precision tensor used by training and evaluation.
pub type TensorF32 = Tensor5<f32>;
/// Double-precision tensor, used where finite-difference oracles need headroom.
pub type TensorF64 = Tensor5<f64>;
