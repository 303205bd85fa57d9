//! Dataset synthesis, training, evaluation and the command-line runner for
//! the ObjectFormer manipulation detector. Numerics live in `objectformer-core`.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod manifest;
pub mod predict;
pub mod train;

pub use config::{ConfigSources, RunConfig};
pub use error::{RunError, RunResult};
