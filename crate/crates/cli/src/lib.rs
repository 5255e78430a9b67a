//! Command-line driver for `bros-core`: TOML run configs, CSV traces with a
//! manifest header, and the `bros` subcommands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use error::CliError;
