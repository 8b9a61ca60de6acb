//! Command implementations behind the `gpss` binary.

pub mod commands;
pub mod config;

pub use config::RunConfig;
