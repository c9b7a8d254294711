//! Dense CPU tensors with a tape-based reverse-mode autodiff and an Adam
//! optimizer. Everything is single-threaded and deterministic for a fixed
//! seed.

mod adam;
mod error;
pub mod gradcheck;
pub mod kernels;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use rng::Rng;
pub use scalar::{Dtype, Scalar};
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Variance floor added inside batch normalization.
pub const BN_EPS: f64 = 1e-5;

/// Running-statistics momentum: `running = (1 - m) * running + m * batch`.
pub const BN_MOMENTUM: f64 = 0.1;

/// Lower clamp applied before every logarithm in entropy-style losses.
pub const LOG_EPS: f64 = 1e-12;
