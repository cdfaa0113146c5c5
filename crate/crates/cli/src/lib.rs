//! Run orchestration for `dense2moe-core`: TOML run configs, checkpoints,
//! CSV and image output, and the pipeline steps behind the CLI.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod output;
pub mod pipeline;

pub use error::{CliError, Result};
