//! Configuration, orchestration and reporting for the `lqpg` benchmark CLI.

pub mod cli;
pub mod config;
pub mod report;
pub mod run;

pub use config::{load_config, parse_config, ConfigError, Mode, Overrides, RunSpec};
pub use report::{emit_report, Format};
pub use run::{run_benchmark, ReportBundle, RunOptions};
