//! Dataset IO, configuration, metrics and the `nmf` subcommands.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod synthetic;
