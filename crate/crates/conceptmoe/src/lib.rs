//! File formats, training runs, verification suites and the command line
//! for concept-level MoE models built on `conceptmoe-core`.

pub mod checkpoint;
pub mod chunk;
pub mod cli;
pub mod cost;
pub mod error;
pub mod io;
pub mod train;
pub mod verify;

pub use error::{AppError, Result};
