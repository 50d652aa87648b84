//! Command-line driver: configuration, artifact writers and subcommands.

pub mod artifacts;
pub mod commands;
pub mod config;
