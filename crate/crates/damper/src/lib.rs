//! File formats, checkpoints and the command-line front end around
//! `damper_core`.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod run;

pub use error::{DamperError, Result};
