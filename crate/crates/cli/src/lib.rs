//! File formats, configuration and command implementations for the `evsplat` binary.

pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod viz;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, Result};
