//! Reconstruction of photon-number statistics from low-resolution photon
//! counters measured at several quantum efficiencies.

pub mod detector;
pub mod error;
pub mod harness;
pub mod ingest;
pub mod recon;
pub mod sampler;
pub mod states;

pub use error::{Error, Result};
