//! Command-line harness around `pkmlab`: tokenization, run orchestration and
//! report files.
//!
//! Every subcommand takes a JSON [`config::RunConfig`], writes a
//! [`report::RunManifest`] first and then its outputs into one directory.

pub mod bench;
pub mod commands;
pub mod config;
pub mod data;
pub mod experiment;
pub mod report;
pub mod vocab;

pub use commands::{run, Command, RunOptions, RunSummary};
