//! Configuration, presets and experiment runs behind the `edgeflow` binary.

pub mod config;
pub mod experiment;
pub mod output;
pub mod preset;
pub mod verify;

pub use config::{Config, ConfigError, Experiment, Scenario};
pub use experiment::{Scheme, SweepRow};
pub use output::{run, Manifest, RunError};
