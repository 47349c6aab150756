//! Command implementations and the benchmark harness behind the `cascade`
//! binary, exposed as a library so the acceptance suite can drive them
//! directly.

pub mod bench;
pub mod commands;
pub mod report;
pub mod specs;

pub use commands::{CmdError, CmdResult, GlobalOpts};
