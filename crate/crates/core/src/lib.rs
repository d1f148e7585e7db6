pub mod cli;
pub mod config;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod features;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod recovery;
pub mod seghead;
pub mod synth;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
