//! Command-line surface of the reconstruction toolkit: dataset container,
//! image export, run manifests and the subcommands themselves.

pub mod commands;
pub mod dataset;
pub mod pgm;

pub use commands::{execute, replay, run, Cli, Job, Manifest};
