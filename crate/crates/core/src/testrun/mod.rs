//! Test-script rendering, verbose runner log parsing, and outcome classification.

mod classify;
mod log;
mod script;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::TestId;

pub use classify::{classify_outcomes, Classification, Verdict};
pub use log::parse_verbose_log;
pub use script::{render_run_script, RUN_TESTS_TEMPLATE, UTS_PLACEHOLDER};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TestRunError {
    #[error("no tests selected")]
    EmptySelection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestOutcome {
    Passed,
    Failed,
    Errored,
    Skipped,
}

impl TestOutcome {
    pub fn is_failure(self) -> bool {
        matches!(self, TestOutcome::Failed | TestOutcome::Errored)
    }

    /// Status word as printed by the verbose runner.
    pub fn marker(self) -> &'static str {
        match self {
            TestOutcome::Passed => "PASSED",
            TestOutcome::Failed => "FAILED",
            TestOutcome::Errored => "ERROR",
            TestOutcome::Skipped => "SKIPPED",
        }
    }

    // Merge rank when one test reports several statuses (e.g. PASSED then a
    // teardown ERROR): failures dominate passes, passes dominate skips.
    fn rank(self) -> u8 {
        match self {
            TestOutcome::Skipped => 0,
            TestOutcome::Passed => 1,
            TestOutcome::Failed => 2,
            TestOutcome::Errored => 3,
        }
    }

    pub fn merge(self, other: TestOutcome) -> TestOutcome {
        if other.rank() > self.rank() {
            other
        } else {
            self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestRecord {
    pub id: TestId,
    pub outcome: TestOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunnerStatus {
    Completed,
    CommandFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRunReport {
    pub records: Vec<TestRecord>,
    pub runner_status: RunnerStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_log_path: Option<PathBuf>,
    /// Seconds.
    pub duration: f64,
}

impl TestRunReport {
    pub fn command_failed() -> Self {
        Self { records: Vec::new(), runner_status: RunnerStatus::CommandFailed, raw_log_path: None, duration: 0.0 }
    }

    pub fn outcome_of(&self, id: &TestId) -> Option<TestOutcome> {
        self.records.iter().find(|r| &r.id == id).map(|r| r.outcome)
    }
}
