//! File formats, IO and the command-line front end for `scalenas-core`.

pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod files;
pub mod series;

pub use error::{CliError, Result};
