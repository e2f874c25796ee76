//! Configuration and experiment runner behind the `mvfbm` binary.

pub mod config;
pub mod experiments;

pub use config::{parse, ConfigError, RunConfig};
pub use experiments::{run, write_outputs, RunReport};
