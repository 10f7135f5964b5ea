pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_evaluate, cmd_ingest, cmd_report, cmd_split, cmd_sweep, cmd_train, Context, SplitName};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
