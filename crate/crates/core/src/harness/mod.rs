//! Configuration, persistence, parallel execution and the command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod gradcheck;
pub mod metrics;
pub mod parallel;
