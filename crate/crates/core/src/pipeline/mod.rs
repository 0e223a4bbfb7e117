//! Orchestration: run configuration, the stage runners behind the command
//! line, the end-to-end `all` target and artifact validation.

pub mod config;
pub mod stages;
pub mod validate;

pub use config::{DataConfig, EvalConfig, ExportConfig, RunConfig};
pub use stages::{run_all, Layout, StageStamp, Summary};
pub use validate::{validate_artifacts, ValidationReport, Violation};

/// Environment variable naming the default artifact root.
pub const ARTIFACTS_ENV: &str = "TRIGEN_ARTIFACTS";
