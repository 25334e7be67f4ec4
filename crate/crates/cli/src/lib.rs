//! Command-line pipeline over `dbgp-core`: cohort generation, pretraining,
//! training, prediction and reporting into reproducible run directories.

pub mod artifacts;
pub mod commands;
pub mod config;

use dbgp_core::Error;

pub use commands::{run, Command};
pub use config::{resolve, RunConfig};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_IO: i32 = 5;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DBGP_OUT";

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Parse { .. }
        | Error::Validation { .. }
        | Error::Dimension(_)
        | Error::Lookup { .. }
        | Error::Extrapolation { .. }
        | Error::UndefinedMetric(_)
        | Error::Checkpoint(_) => EXIT_DATA,
        Error::Numeric(_) | Error::Divergence { .. } => EXIT_NUMERIC,
        Error::Io { .. } => EXIT_IO,
    }
}
