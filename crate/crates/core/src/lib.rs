//! Core algorithms for looking-at-me classification of face sequences.
//!
//! Everything in this crate is pure computation over in-memory data and
//! builds without `std`. File formats, the command line and training
//! orchestration live in the `lam` crate.

#![no_std]

extern crate alloc;

pub mod annotations;
pub mod augment;
pub mod error;
pub mod image;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod schedule;
pub mod seed;
pub mod synth;
pub mod windowing;

pub use error::{Error, Result};
