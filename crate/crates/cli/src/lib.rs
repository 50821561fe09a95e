pub mod artifacts;
pub mod commands;
pub mod curve;
pub mod error;
pub mod ops;
pub mod pipeline;

pub use commands::{run, Cli};
pub use error::{CliError, CliResult};
