//! Configuration, execution and file output for the `mftc` command.

pub mod config;
pub mod run;
