//! Dense tensors with reverse-mode automatic differentiation.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, ElementCheck, GradcheckOptions, GradcheckReport};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Norm floor used by every cosine in the crate.
pub const COSINE_EPS: f64 = 1e-12;
