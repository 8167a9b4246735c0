//! The full pipeline: embed, encoder, chunk, concept stack, EMA dechunk,
//! decoder with joint decoding, head. Also the plain MoE baseline it is
//! measured against and the conversion from one to the other.
//!
//! With every position a boundary, `p = 1` and last-token merging, the
//! concept stack's residual update lands unchanged on each token, so a
//! converted model with zero concept projectors computes exactly what the
//! baseline computes.

mod config;
mod forward;
mod weights;

pub use config::{Architecture, ModelConfig};
pub use forward::{concept_order, forward, logits_of, ForwardTrace, Losses, Mode};
pub use weights::{build_baseline_moe, conversion_param_delta, convert_to_conceptmoe, param_count, Router, Weights};

#[cfg(test)]
mod tests;
