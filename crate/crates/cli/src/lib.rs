//! Operational surface of the workspace: strict configuration, artifact
//! formats and the subcommands behind the `dagr` binary.

pub mod commands;
pub mod config;
pub mod io;
