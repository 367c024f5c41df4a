//! Config handling, single runs, sweeps and shard export behind the `sage`
//! binary.

pub mod config;
pub mod error;
pub mod run;
pub mod sweep;

pub use config::{validate_config, ConfigReport};
pub use error::{CliError, CliResult};
