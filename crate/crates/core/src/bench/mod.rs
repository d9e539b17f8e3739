//! Scenario runner, reports, microbenchmarks and isolation attacks.

pub mod attack;
pub mod config;
pub mod micro;
pub mod runner;
pub mod script;
pub mod workloads;

pub use attack::{attack, Attack, Verdict};
pub use config::{ConfigError, ScenarioConfig, VmSpec};
pub use runner::{
    execute, native_baseline, run, run_with, BreakdownReport, Connector, Execution,
    LocalConnector, RunError, RunOutput, UnixConnector,
};
pub use workloads::{multiplexing_win, random_scenario, vec_add_script, MultiplexResult};
