//! Configuration, pipeline and reporting behind the `percolab` binary.

pub mod config;
pub mod pipeline;
pub mod report;
