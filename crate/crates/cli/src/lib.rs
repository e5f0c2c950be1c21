//! Run configuration, subcommands and experiment summaries behind the
//! `vsfm` binary.

pub mod commands;
pub mod config;
pub mod experiments;
