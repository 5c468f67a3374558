//! Command-line front end: configuration, subcommands and the end-to-end
//! pipeline.

pub mod commands;
pub mod config;
pub mod error;
pub mod logging;
pub mod ops;
pub mod pipeline;
pub mod toydata;
