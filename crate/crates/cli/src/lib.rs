//! Scenario runner behind the `vramsim` binary.

pub mod config;
pub mod scenarios;

pub use config::{Config, ConfigError};
pub use scenarios::{run, write_artifacts, Artifacts, ScenarioName};
