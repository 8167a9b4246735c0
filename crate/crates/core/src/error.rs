use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape; call reset_grads first")]
    BackwardTwice,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("corpus of {len} bytes is shorter than seq_len {seq_len}")]
    CorpusTooShort { len: usize, seq_len: usize },

    #[error("infeasible reallocation: {0}")]
    Infeasible(String),

    #[error(
        "non-finite loss at step {step}: p min {p_min:.4} max {p_max:.4} mean {p_mean:.4} \
         (ce {ce}, aux {aux}, balance {balance})"
    )]
    NonFiniteLoss { step: usize, p_min: f64, p_max: f64, p_mean: f64, ce: f64, aux: f64, balance: f64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidArgument { op, msg: msg.into() }
}
