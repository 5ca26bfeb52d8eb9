//! Task-aware mixed-precision post-training quantization.
//!
//! Layers are scored from hidden activations (spectral entropy of a token Gram matrix and
//! activation variance), ranked into a per-layer bit plan under a budget, and the group-wise
//! quantizer parameters are then tuned on a small calibration set. A sensitivity-sweep
//! allocator, a toy decoder-only transformer and synthetic tasks make the whole pipeline
//! runnable and testable offline.

pub mod alloc;
pub mod calib;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod quant;
pub mod scalar;
pub mod stats;

pub use error::{Result, TaqError};
pub use scalar::Scalar;

/// Dense `f64` matrix, the default tensor type.
pub type Tensor = linalg::Matrix<f64>;
