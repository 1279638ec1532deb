//! Config parsing, experiment orchestration and output files for `piconet`.

pub mod config;
pub mod manifest;
pub mod run;

pub use config::{parse_config, parse_config_str, ConfigError, ExperimentConfig};
pub use run::{execute, replay, CliError, Command, RunRequest};
