//! Configuration-driven command pipeline behind the `cto-lab` binary.

pub mod config;
pub mod pipeline;

pub use config::{parse_config, parse_config_str, Command, RunConfig};
pub use pipeline::{run_pipeline, Outcome};
