//! Dense `f64` tensors, reverse-mode autograd over a fixed operator set,
//! the `TNSR` archive format and a finite-difference gradient checker.

pub mod archive;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use tensor::Tensor;

/// Batch-norm epsilon used throughout.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;
