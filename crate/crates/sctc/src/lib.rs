//! File formats, training, evaluation and the command line around
//! `sctc-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod eval;
pub mod formats;
pub mod train;

pub use error::{Error, Result};
