//! Concept-level mixture-of-experts sequence modeling.
//!
//! A causal MoE transformer whose middle stack runs on dynamically chunked
//! "concepts": an encoder scores chunk boundaries between adjacent tokens,
//! merges each chunk into one concept, the concept stack processes the
//! shorter sequence, and a dechunk step smooths concepts with an EMA and
//! scatters them back to token positions for the decoder.
//!
//! The crate is `no_std` (with `alloc`); file formats, IO and the CLI live
//! in the `conceptmoe` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]
// Range checks are written `!(x > lo)` so NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod chunking;
pub mod costmodel;
pub mod data;
pub mod dechunking;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod transformer;

pub use error::{Error, Result};
