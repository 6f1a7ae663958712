//! Reverse-mode differentiation over dense 2-D arrays, forward-mode dual
//! numbers for fused kernels, Adam, and a finite-difference checker.

pub mod adam;
pub mod dual;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use dual::{Dual, Real};
pub use gradcheck::{grad_check, CheckStatus, GradCheckReport};
pub use tape::{logistic, logit, ConvGeom, Gradients, Tape, Var};
pub use tensor::Tensor;
