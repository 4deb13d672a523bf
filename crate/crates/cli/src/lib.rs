//! Command-line experiment runner for the `lss-core` simulator.

pub mod config;
pub mod run;
pub mod sweep;
