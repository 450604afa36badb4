//! File formats, configuration, checkpoints and command implementations for
//! the `iur` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod io;
