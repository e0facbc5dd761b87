//! Command implementations behind the `vflow` binary.

pub mod commands;
pub mod config;
