//! Configuration, data, optimizer, persistence, metrics and command runners.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod optim;
pub mod run;
pub mod trainer;
