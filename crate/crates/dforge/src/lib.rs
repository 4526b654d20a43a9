//! Command line front end for `dforge-core`: file formats, run
//! configuration, the subcommands, grid sweeps and a synthetic corpus
//! generator for desk-scale experiments.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod sweep;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
