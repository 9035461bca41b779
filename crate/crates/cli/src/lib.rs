//! Experiment orchestration: configuration, data generation, the two
//! training stages, evaluation, audits and serving replay.

pub mod config;
pub mod pipeline;

pub use config::{ExperimentConfig, Overrides};
