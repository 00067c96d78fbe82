//! Command-line front end for `hetfactor`: data ingestion, configuration
//! and artifact output.

pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;
pub mod output;

pub use config::{ModelKind, RunConfig, Settings};
pub use error::{CliError, Result};
