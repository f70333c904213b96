//! Library surface of the pipeline commands, so integration and acceptance
//! tests can drive them in-process.

pub mod commands;
pub mod config;
pub mod io;
