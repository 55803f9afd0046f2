//! Configuration, persistence, experiment orchestration, and report
//! emission.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod report;
pub mod selftest;

pub use checkpoint::{collect_named, load_checkpoint, save_checkpoint, NamedTensors};
pub use config::ExperimentConfig;
pub use experiment::{Experiment, MethodOutcome, RunArtifacts, TaskData};
pub use report::{emit_report, MethodRow, ReportPaths};
pub use selftest::{run_selftest, selftest_to_error, SelftestReport};
