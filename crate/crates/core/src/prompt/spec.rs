use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::state::TestId;

use super::{DegradationPromptInputs, PromptError};

pub const MAX_SELECTED_TESTS: usize = 50;

/// The structured degradation task returned by the generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InversionTaskSpec {
    pub task_name: String,
    pub category: String,
    pub selected_uts: Vec<TestId>,
    pub task_description: String,
    pub expected_result: String,
    pub recovery_strategy: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTaskSpec {
    pub spec: InversionTaskSpec,
    /// Selected entries dropped because they were not candidate tests.
    pub dropped: Vec<String>,
}

const FIELDS: [(&str, &str); 6] = [
    ("task name", "Task Name"),
    ("category", "Category"),
    ("selected uts", "Selected UTs"),
    ("task description", "Task Description"),
    ("expected result", "Expected Result"),
    ("recovery strategy", "Recovery Strategy"),
];

// `**Task Name**: x`, `**Task Name:** x`, `- **Category**: x`
static LABEL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^\s*(?:[-*]\s+)?\*\*\s*(task name|category|selected uts|task description|expected result|recovery strategy)\s*(?::\s*\*\*|\*\*\s*:?)\s?(.*)$",
    )
    .unwrap()
});

fn is_fence(line: &str) -> bool {
    line.trim() == "---"
}

/// Picks the first `---`-fenced block that carries a task-name field, or the
/// whole text when there is none.
fn task_block(text: &str) -> Vec<&str> {
    let lines: Vec<&str> = text.lines().collect();
    let fences: Vec<usize> = lines.iter().enumerate().filter(|(_, l)| is_fence(l)).map(|(i, _)| i).collect();
    for pair in fences.windows(2) {
        let block = &lines[pair[0] + 1..pair[1]];
        if block.iter().any(|l| LABEL.captures(l).is_some_and(|c| c[1].eq_ignore_ascii_case("task name"))) {
            return block.to_vec();
        }
    }
    lines
}

fn clean_test_token(token: &str) -> &str {
    token.trim_matches(|c: char| matches!(c, '`' | '\'' | '"' | ',' | ';' | '<' | '>' | '(' | ')'))
}

/// Extracts the six labelled fields from generator output. Selected tests are
/// intersected with the prompt's candidates; unknown entries are dropped and
/// reported, not fatal.
pub fn parse_task_spec(llm_output: &str, inputs: &DegradationPromptInputs) -> Result<ParsedTaskSpec, PromptError> {
    let mut values: [Option<String>; 6] = Default::default();
    let mut current: Option<usize> = None;
    for line in task_block(llm_output) {
        if let Some(c) = LABEL.captures(line) {
            let key = c[1].to_ascii_lowercase();
            let idx = FIELDS.iter().position(|(k, _)| *k == key).expect("regex only matches known labels");
            // first occurrence wins
            if values[idx].is_none() {
                values[idx] = Some(c[2].to_string());
                current = Some(idx);
            } else {
                current = None;
            }
        } else if let Some(idx) = current {
            let v = values[idx].get_or_insert_with(String::new);
            v.push('\n');
            v.push_str(line);
        }
    }

    let take = |idx: usize| -> Result<String, PromptError> {
        values[idx]
            .as_deref()
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(str::to_string)
            .ok_or(PromptError::MissingField(FIELDS[idx].1))
    };
    let task_name = take(0)?;
    let category_raw = take(1)?;
    let selected_raw = take(2)?;
    let task_description = take(3)?;
    let expected_result = take(4)?;
    let recovery_strategy = take(5)?;

    let category = category_raw
        .split_whitespace()
        .next()
        .unwrap_or_default()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_string();
    if category.is_empty() {
        return Err(PromptError::MissingField("Category"));
    }

    let candidates: HashSet<&TestId> = inputs.candidate_tests.iter().collect();
    let mut selected: Vec<TestId> = Vec::new();
    let mut dropped = Vec::new();
    for line in selected_raw.lines() {
        let line = line.trim().trim_start_matches(['-', '*', '•']).trim();
        let line = line.trim_start_matches(|c: char| c.is_ascii_digit());
        let line = line.strip_prefix(". ").unwrap_or(line);
        for token in line.split(|c: char| c.is_whitespace() || c == ',') {
            let token = clean_test_token(token);
            if token.is_empty() {
                continue;
            }
            match token.parse::<TestId>() {
                Ok(id) if candidates.contains(&id) => {
                    if !selected.contains(&id) {
                        selected.push(id);
                    }
                }
                _ => dropped.push(token.to_string()),
            }
        }
    }
    if !dropped.is_empty() {
        tracing::warn!(dropped = ?dropped, "selected tests outside the candidate list were dropped");
    }
    if selected.is_empty() {
        return Err(PromptError::NoValidTests);
    }
    if selected.len() > MAX_SELECTED_TESTS {
        return Err(PromptError::TooManyTests(selected.len()));
    }

    Ok(ParsedTaskSpec {
        spec: InversionTaskSpec {
            task_name,
            category,
            selected_uts: selected,
            task_description,
            expected_result,
            recovery_strategy,
        },
        dropped,
    })
}

/// Renders a spec in the generator's own output format.
pub fn render_task_spec(spec: &InversionTaskSpec) -> String {
    let mut out = String::from("---\n");
    out.push_str(&format!("**Task Name**: {}\n", spec.task_name));
    out.push_str(&format!("**Category**: {}\n", spec.category));
    out.push_str("**Selected UTs**:\n");
    for t in &spec.selected_uts {
        out.push_str(&format!("- {t}\n"));
    }
    out.push_str(&format!("**Task Description**: {}\n", spec.task_description));
    out.push_str(&format!("**Expected Result**: {}\n", spec.expected_result));
    out.push_str(&format!("**Recovery Strategy**: {}\n", spec.recovery_strategy));
    out.push_str("---");
    out
}
