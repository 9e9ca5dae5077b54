//! Configuration, seeding, parallel execution and persistence for the
//! Lorentz-gas experiments.

pub mod config;
pub mod error;
pub mod output;
pub mod pipelines;
pub mod run;
pub mod streams;

pub use config::{BackendChoice, ExperimentConfig, Mode};
pub use error::{HarnessError, Result};
pub use run::{execute, run, ModeOutput, RunManifest};
