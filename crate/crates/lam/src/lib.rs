//! File formats, configuration, training loops and the `lam` command line
//! built on top of `lam-core`.

pub mod annotations;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod frames;
pub mod train;

pub use error::{Error, Result};
