//! Training, evaluation, profiling and analysis over the library pieces.

pub mod analysis;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod pipeline;
pub mod report;
pub mod train;

pub use checkpoint::{file_digest, Checkpoint, RngState, Stage};
