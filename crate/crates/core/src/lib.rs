//! Query-conditioned audio source separation with rectified flow matching.

pub mod checkpoint;
pub mod classifier;
pub mod codec;
pub mod condition;
pub mod config;
pub mod dataset;
pub mod frontend;
pub mod layout;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod vfield;
mod nn;
pub mod optim;
pub mod pipeline;
pub mod plot;
pub mod selftest;
pub mod train;

pub use error::{Error, Result};
