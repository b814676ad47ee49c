//! Command-line harness around `tokenmixer-core`: the TOML experiment
//! config, JSON checkpoints and reports, a threaded executor, and the
//! bodies of every subcommand.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod exec;
pub mod report;

pub use config::ExperimentConfig;
