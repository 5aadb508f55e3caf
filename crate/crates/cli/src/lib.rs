//! Pipeline commands behind the `worldflow` binary.

pub mod commands;
pub mod config;
pub mod data;
