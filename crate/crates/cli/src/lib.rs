//! Scenario runner behind the `insider-lab` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod output;
pub mod scenarios;

pub use config::{validate_config, ConfigError, ExperimentConfig, Overrides, Scenario};
pub use output::{Cell, ResultTable, RunInfo};
pub use scenarios::{run_scenario, ScenarioOutput};
