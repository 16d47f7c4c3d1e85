use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::state::TestId;

use super::{RunnerStatus, TestOutcome, TestRunReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    InstanceOk,
    Discard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub fail_to_pass: BTreeSet<TestId>,
    pub pass_to_pass: BTreeSet<TestId>,
    pub verdict: Verdict,
}

/// Outcome of a selected test aggregated over every report record it covers.
/// `None` means nothing ran for it.
fn aggregate(selected: &TestId, report: &TestRunReport) -> Option<TestOutcome> {
    report.records.iter().filter(|r| selected.covers(&r.id)).map(|r| r.outcome).reduce(TestOutcome::merge)
}

/// Splits the selected tests into fail-to-pass and pass-to-pass sets.
///
/// A runner that never completed fails every selected test. Otherwise failed
/// and errored tests, plus selected tests the report never mentions, fail;
/// passed tests pass; skipped tests land in neither set. An empty
/// fail-to-pass set discards the instance.
pub fn classify_outcomes(selected: &[TestId], report: &TestRunReport) -> Classification {
    let mut fail_to_pass = BTreeSet::new();
    let mut pass_to_pass = BTreeSet::new();
    for test in selected {
        if report.runner_status == RunnerStatus::CommandFailed {
            fail_to_pass.insert(test.clone());
            continue;
        }
        match aggregate(test, report) {
            None => {
                fail_to_pass.insert(test.clone());
            }
            Some(o) if o.is_failure() => {
                fail_to_pass.insert(test.clone());
            }
            Some(TestOutcome::Passed) => {
                pass_to_pass.insert(test.clone());
            }
            Some(_) => {}
        }
    }
    let verdict = if fail_to_pass.is_empty() { Verdict::Discard } else { Verdict::InstanceOk };
    Classification { fail_to_pass, pass_to_pass, verdict }
}
