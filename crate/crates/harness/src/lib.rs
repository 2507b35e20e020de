//! Experiment driver for the resonance defense: datasets, configuration,
//! the train/attack/evaluate pipeline and report output.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod pnm;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use experiment::run_experiment;
pub use report::ExperimentReport;
