//! IVF vector search with a cache-aware query scheduler: queries that probe
//! overlapping clusters are grouped and run back to back, the next group's
//! first clusters are prefetched, and cluster loads are packed across worker
//! threads by size.

pub mod cache;
pub mod clock;
pub mod embedding;
pub mod engine;
pub mod error;
pub mod grouping;
pub mod index;
pub mod loader;
pub mod prefetch;
pub mod workload;

pub use error::{Error, Result};
