//! Benchmark harness for the cluster-locality-aware search engine: synthetic
//! workload generation, index build, trace replay with warm-up exclusion,
//! and report files.

pub mod compare;
pub mod config;
pub mod error;
pub mod grouptime;
pub mod report;
pub mod run;

pub use config::BenchConfig;
pub use error::{BenchError, Result};
