//! Self-supervised representation learning workbench built around the
//! whitened-MSE loss: feature whitening via Cholesky factorization with an
//! analytic backward pass, batch slicing, multi-positive MSE, and the usual
//! contrastive/triplet baselines, plus desk-scale training and evaluation.

pub mod augment;
pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod data;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod slicing;
pub mod train;

pub use linalg::Matrix;
pub use scalar::Scalar;

/// Default training/test precision.
pub type Mat = Matrix<f64>;
/// Reduced-precision variant for memory-constrained training.
pub type Mat32 = Matrix<f32>;
