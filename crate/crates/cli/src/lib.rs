//! Library side of the `headfield` command-line tool.

pub mod commands;
pub mod config;

pub use commands::*;
pub use config::{Preset, Settings, SNAPSHOT_FILE};
