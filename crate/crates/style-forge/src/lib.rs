//! File formats, configuration, synthetic data and the staged pipeline
//! behind the `style-forge` command.

pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod synthetic;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use pipeline::Run;
