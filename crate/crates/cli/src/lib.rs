//! Configuration, dataset ingestion and artifact emission for the
//! `multimed` command.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod output;
pub mod run;
pub mod simulate;

pub use error::{CliError, Result};
