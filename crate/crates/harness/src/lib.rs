//! Experiment driver around `selfcal-core`: JSON configs, dataset and
//! model files, the three training pipelines and result comparison.

pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;

pub use config::{DatasetSpec, ExperimentConfig, Method};
pub use error::{HarnessError, Result};
pub use pipeline::RunReport;
