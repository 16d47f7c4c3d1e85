//! Derive environment-repair tasks by inverting healthy environments.
//!
//! The pipeline starts from a gold environment whose tests all pass, asks a
//! generator model for a degradation task, lets an agent carry it out inside a
//! sandbox, records the result as build directives, verifies the induced
//! failures on fresh rebuilds, and packages repair task bundles. Solver
//! trajectories collected on those bundles are filtered into a dataset.

pub mod agent;
pub mod config;
pub mod demo;
pub mod dockerfile;
pub mod harness;
pub mod llm;
pub mod packager;
pub mod pipeline;
pub mod prompt;
pub mod sandbox;
pub mod state;
pub mod stats;
pub mod testrun;
pub mod trajectory;
pub mod util;

pub use state::{
    compose_deltas, BaseImageRef, CodePatch, EnvDelta, EnvironmentState, GoldInstance, StateError, TestId,
};
pub use testrun::{
    classify_outcomes, parse_verbose_log, render_run_script, Classification, RunnerStatus, TestOutcome, TestRecord,
    TestRunReport, Verdict,
};
