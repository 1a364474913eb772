//! Files, runs and command-line tooling around `addlab-core`.

pub use addlab_core as core;

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod fsutil;
pub mod probe;
pub mod report;
pub mod run;

pub use error::{LabError, Result};
