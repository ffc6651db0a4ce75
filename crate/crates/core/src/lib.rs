//! Query-based multi-sensor feature fusion at desk scale.
//!
//! The crate provides a minimal dense tensor with reverse-mode
//! differentiation, three modality-specific attention modules (dual attention
//! for camera queries, triple attention for LiDAR queries, mixed attention
//! for radar queries), reference-point projection and bilinear feature
//! sampling, a 3D detection head with set matching and weighted losses, and a
//! synthetic-scene pipeline that drives all of it end to end.
//!
//! Core math is generic over the scalar type ([`Scalar`]); the harness and
//! every documented tolerance use the `f64` aliases below.

pub mod error;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{ConfigError, PipelineError, TensorError};
pub use scalar::Scalar;
pub use tape::{GradientMap, Tape, VarId};
pub use tensor::Tensor;

/// Double-precision tensor, the default working type of the harness.
pub type Tensor64 = Tensor<f64>;
/// Double-precision tape.
pub type Tape64 = Tape<f64>;
/// Single-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Single-precision tape.
pub type Tape32 = Tape<f32>;
