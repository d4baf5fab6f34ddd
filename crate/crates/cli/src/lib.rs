//! Library surface of the command-line tools, exposed so integration
//! tests can drive every command in-process.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
