pub mod artifacts;
pub mod bounds;
pub mod cli;
pub mod config;
pub mod conic;
pub mod controller;
pub mod error;
pub mod feeder;
pub mod linalg;
pub mod linearize;
pub mod loadflow;
pub mod metrics;
pub mod phase;
pub mod recovery;
pub mod series;
pub mod socp;
pub mod tightening;
pub mod uncertainty;

pub use error::{Error, Result};

/// Stamped into every artifact the crate writes.
pub const FORMAT_VERSION: u32 = 1;
