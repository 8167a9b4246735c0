//! Dense tensors with tape-based reverse-mode differentiation.

mod finite_diff;
mod gradcheck;
mod ops;
mod scalar;
mod tape;
mod tensor;


pub use finite_diff::{finite_diff_grad, max_rel_err};
pub use gradcheck::{grad_check, REL_ERR_FLOOR};
pub use ops::IGNORE_INDEX;
pub use scalar::{gemm, MatView, Scalar};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;

/// Denominator guard of [`Tape::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;
