//! Job plumbing behind the `hfm` binary: a TOML job file, flag overrides,
//! and one function per subcommand.

pub mod commands;
pub mod config;
pub mod error;

pub use config::JobConfig;
pub use error::{CliError, CliResult};
