pub mod baselines;
pub mod belief;
pub mod config;
pub mod error;
pub mod harness;
pub mod intent;
pub mod nn;
pub mod perception;
pub mod policy;
pub mod seed;
pub mod simenv;
pub mod stats;
pub mod store;

pub use error::{Error, Result};
