//! Experiment harness: scenario configuration, Monte-Carlo trials over
//! the estimation schemes, metrics, and result serialization.

pub mod config;
pub mod metrics;
pub mod runner;
