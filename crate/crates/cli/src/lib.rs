//! Pipeline commands for PVS segmentation: preprocessing, fold splitting,
//! training, inference, evaluation and phantom generation, all driven by JSON
//! manifests and a single JSON configuration.

pub mod commands;
pub mod config;
pub mod error;
pub mod log;

pub use config::PipelineConfig;
pub use error::{CliError, Result};
