use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::state::TestId;

use super::templates::{self, fill, Indent};
use super::{InversionTaskSpec, PromptError};

/// How much direction the repair issue gives the solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceLevel {
    Strong,
    Weak,
    Balanced,
}

impl GuidanceLevel {
    pub const ALL: [GuidanceLevel; 3] = [GuidanceLevel::Strong, GuidanceLevel::Weak, GuidanceLevel::Balanced];

    /// Uniform draw over the three levels.
    pub fn draw(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::ALL[rng.random_range(0..Self::ALL.len())]
    }

    pub fn template(self) -> &'static str {
        match self {
            GuidanceLevel::Strong => templates::REPAIR_PROMPT_STRONG,
            GuidanceLevel::Weak => templates::REPAIR_PROMPT_WEAK,
            GuidanceLevel::Balanced => templates::REPAIR_PROMPT_BALANCED,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceLevel::Strong => "strong",
            GuidanceLevel::Weak => "weak",
            GuidanceLevel::Balanced => "balanced",
        }
    }
}

/// Renders the issue-writing prompt for the given failing tests. Without an
/// explicit level, one is drawn from `seed`.
pub fn build_issue_prompt(
    spec: &InversionTaskSpec,
    symptoms: &[TestId],
    level: Option<GuidanceLevel>,
    seed: u64,
) -> Result<(GuidanceLevel, String), PromptError> {
    if symptoms.is_empty() {
        return Err(PromptError::EmptySymptoms);
    }
    let level = level.unwrap_or_else(|| GuidanceLevel::draw(seed));
    let symptom_lines = symptoms.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("\n");
    let text = fill(
        level.template(),
        &[(templates::P_TASK_DESCRIPTION, spec.task_description.as_str()), (templates::P_SYMPTOMS, &symptom_lines)],
        Indent::None,
    );
    Ok((level, text))
}

fn hint_marker_rest(line: &str) -> Option<&str> {
    let t = line.trim();
    let head = t.get(..5)?;
    head.eq_ignore_ascii_case("hint:").then(|| t[5..].trim_start())
}

/// Splits issue text at the first line beginning with a `Hint:` marker
/// (case-insensitive). Text after the marker is the hint. Without a marker the
/// text comes back unchanged.
pub fn strip_hint(issue: &str) -> (String, Option<String>) {
    let mut offset = 0;
    for line in issue.split_inclusive('\n') {
        if let Some(rest_of_line) = hint_marker_rest(line) {
            let body = issue[..offset].trim_end().to_string();
            let after = &issue[offset + line.len()..];
            let hint = if rest_of_line.is_empty() {
                after.trim().to_string()
            } else {
                format!("{rest_of_line}\n{after}").trim().to_string()
            };
            return (body, (!hint.is_empty()).then_some(hint));
        }
        offset += line.len();
    }
    (issue.to_string(), None)
}

/// A repair issue: body plus the optional hint kept apart from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueStatement {
    pub body: String,
    pub hint: Option<String>,
    pub guidance_level: GuidanceLevel,
}

impl IssueStatement {
    pub fn from_llm_output(text: &str, level: GuidanceLevel) -> Result<Self, PromptError> {
        let (body, hint) = strip_hint(text.trim());
        let body = body.trim().to_string();
        if body.is_empty() {
            return Err(PromptError::EmptyIssue);
        }
        Ok(Self { body, hint, guidance_level: level })
    }

    /// The problem statement shown to the solver.
    pub fn problem_statement(&self, include_hint: bool) -> String {
        match (&self.hint, include_hint) {
            (Some(hint), true) => format!("{}\nHint:\n{}", self.body, hint),
            _ => self.body.clone(),
        }
    }
}
