use std::sync::LazyLock;

use regex::Regex;

use crate::state::TestId;

use super::{RunnerStatus, TestOutcome, TestRecord, TestRunReport};

// `tests/a.py::t1 PASSED [ 50%]`, optionally with a parenthesized skip/xfail reason.
static VERBOSE_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(\S+) (PASSED|FAILED|ERROR|SKIPPED|XFAIL|XPASS)(?:\s+\(.*\))?(?:\s+\[\s*\d+%\])?\s*$").unwrap()
});

// xdist form: `[gw0] [ 50%] PASSED tests/a.py::t1`
static XDIST_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\[gw\d+\] \[\s*\d+%\] (PASSED|FAILED|ERROR|SKIPPED|XFAIL|XPASS) (\S+)\s*$").unwrap()
});

// Short summary form: `FAILED tests/a.py::t2 - AssertionError`
static SUMMARY_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(PASSED|FAILED|ERROR|SKIPPED|XFAIL|XPASS) (\S+)(?: - .*)?\s*$").unwrap());

// `==== 1 failed, 1 passed in 0.12s ====`, `==== no tests ran in 0.01s ====`
static FOOTER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^=+ (?:.*\b(?:passed|failed|errors?|skipped|deselected|xfailed|xpassed|warnings?|rerun)\b.*|no tests ran) in (\d+(?:\.\d+)?)s(?: \([^)]*\))? =+\s*$",
    )
    .unwrap()
});

fn outcome(marker: &str) -> TestOutcome {
    match marker {
        "PASSED" | "XPASS" => TestOutcome::Passed,
        "FAILED" => TestOutcome::Failed,
        "ERROR" => TestOutcome::Errored,
        _ => TestOutcome::Skipped,
    }
}

fn looks_like_test(id: &str) -> bool {
    id.contains("::") || id.ends_with(".py")
}

/// Parses the log written by the verbose test runner. Never fails: a log
/// without a session summary footer yields `CommandFailed` with whatever
/// per-test lines were found.
pub fn parse_verbose_log(log: &str) -> TestRunReport {
    let mut records: Vec<TestRecord> = Vec::new();
    let mut footer_seconds: Option<f64> = None;

    for raw in log.lines() {
        let line = raw.trim_end_matches('\r');
        if let Some(c) = FOOTER.captures(line) {
            footer_seconds = c[1].parse().ok();
            continue;
        }
        let hit = if let Some(c) = VERBOSE_LINE.captures(line) {
            Some((c.get(1).unwrap().as_str(), c.get(2).unwrap().as_str()))
        } else if let Some(c) = XDIST_LINE.captures(line) {
            Some((c.get(2).unwrap().as_str(), c.get(1).unwrap().as_str()))
        } else {
            SUMMARY_LINE.captures(line).map(|c| (c.get(2).unwrap().as_str(), c.get(1).unwrap().as_str()))
        };
        let Some((id_text, marker)) = hit else { continue };
        if !looks_like_test(id_text) {
            continue;
        }
        let Ok(id) = id_text.parse::<TestId>() else { continue };
        let seen = outcome(marker);
        match records.iter_mut().find(|r| r.id == id) {
            Some(existing) => existing.outcome = existing.outcome.merge(seen),
            None => records.push(TestRecord { id, outcome: seen }),
        }
    }

    TestRunReport {
        records,
        runner_status: if footer_seconds.is_some() { RunnerStatus::Completed } else { RunnerStatus::CommandFailed },
        raw_log_path: None,
        duration: footer_seconds.unwrap_or(0.0),
    }
}
