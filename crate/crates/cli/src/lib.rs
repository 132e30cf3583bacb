//! Experiment runner for the noisylab engine: flat config files, synthetic
//! presets, and CSV reports (per-run curves, summaries, noise matrices).

pub mod config;
pub mod experiment;
pub mod preset;
pub mod report;

pub use config::{DataSource, ExperimentSpec, RawConfig, Variant};
pub use experiment::{run_experiment, ExperimentResult};
