//! File formats, the training driver, benchmarks and the command line for
//! SparseK attention. The math lives in `sparsek_core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
mod binio;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod formats;
pub mod gradcheck;
pub mod train;

pub use binio::DecodeError;
pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use sparsek_core as core;
