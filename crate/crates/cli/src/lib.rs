//! Command-line surface of the audio-visual induction pipeline: the AVF
//! tensor container, the flat run configuration and the subcommands.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod avf;
pub mod commands;
pub mod config;
pub mod error;
pub mod store;

pub use error::{CliError, Result};
