//! File formats, dataset layout, training and benchmarking pipeline and
//! the command-line front end around `sahmr-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod mesh;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
