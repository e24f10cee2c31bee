//! File formats, benchmarks and command implementations around `pama-core`.
//!
//! The `pama` binary is a thin clap front end over [`commands`]; everything
//! it writes (configs, metrics, summaries, checkpoints, bench CSVs) is
//! defined here so tests can drive the same code in-process.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;

pub use error::{CliError, Result};
