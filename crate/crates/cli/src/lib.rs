//! Experiment harness for fedcvar-core: configs, runs, sweeps, metrics
//! files, parameter snapshots, SVG charts and numerical self-checks.

pub mod charts;
pub mod checks;
pub mod config;
pub mod metrics;
pub mod output;
pub mod runner;
pub mod snapshot;
pub mod sweep;
