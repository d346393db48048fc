//! Configuration and file-based stages behind the `trapkit` command.

pub mod config;
pub mod stages;
