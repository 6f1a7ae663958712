//! Files, run configuration and the task runner behind the command line.

pub mod config;
pub mod dataset;
pub mod run;

pub use config::*;
pub use dataset::{sidecar_path, GridDataset};
pub use run::{gradcheck, predict, run, RunOptions, RunSummary};
