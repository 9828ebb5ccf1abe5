//! Synthetic data, file formats, configuration and the command-line pipeline.

pub mod cli;
pub mod config;
pub mod formats;
pub mod models;
pub mod report;
pub mod synth;

pub use config::Config;
pub use report::EvalReport;
pub use synth::{synth_dataset, OscillationProfile, SynthOutput, SynthSpec, TaskProfile};
