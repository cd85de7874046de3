//! Config-driven experiment runner for the `yosida` solvers.

pub mod config;
pub mod run;

pub use config::{list_instances, ConfigError, Experiment};
pub use run::{execute, Command, Options, Outcome, RunError};
