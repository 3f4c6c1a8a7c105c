//! Config-driven experiment runner and verification suite for `pfl-core`.

pub mod config;
pub mod oracles;
pub mod presets;
pub mod runner;

pub use config::{ConfigError, ExperimentConfig};
pub use runner::{run_experiment, Manifest, RunOptions};
