//! Prompt construction for every LLM-facing stage, parsing of the structured
//! task block the generator returns, hint stripping, and the diversity pool.

mod catalog;
mod issue;
mod pool;
mod spec;
pub mod templates;

use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::{GoldInstance, TestId};
use crate::util::py_list_repr;

pub use catalog::{DirectionCatalog, InterventionDirection, DEFAULT_CATALOG};
pub use issue::{build_issue_prompt, strip_hint, GuidanceLevel, IssueStatement};
pub use pool::MemoryPool;
pub use spec::{parse_task_spec, render_task_spec, InversionTaskSpec, ParsedTaskSpec, MAX_SELECTED_TESTS};

/// Cap on candidate tests injected into one degradation prompt.
pub const CANDIDATE_QUOTA: usize = 200;
pub const MAX_DIRECTIONS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("direction catalog is empty")]
    EmptyCatalog,
    #[error("gold instance has no tests")]
    EmptyInventory,
    #[error("refinement stage requires a draft task")]
    MissingDraft,
    #[error("task block is missing field {0:?}")]
    MissingField(&'static str),
    #[error("no selected test is among the candidate tests")]
    NoValidTests,
    #[error("{0} tests selected, at most {max} allowed", max = MAX_SELECTED_TESTS)]
    TooManyTests(usize),
    #[error("no failing tests to describe")]
    EmptySymptoms,
    #[error("issue text has an empty body")]
    EmptyIssue,
    #[error("direction catalog: {0}")]
    Catalog(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegradationPromptInputs {
    pub candidate_tests: Vec<TestId>,
    pub directions: Vec<InterventionDirection>,
    pub previous_titles: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStage {
    Initial,
    Refine,
}

/// Draws 1–3 directions and up to `CANDIDATE_QUOTA` tests, uniformly and
/// without replacement. Deterministic in `seed`; tests keep inventory order.
pub fn sample_inputs(
    gold: &GoldInstance,
    pool: &MemoryPool,
    catalog: &DirectionCatalog,
    seed: u64,
) -> Result<DegradationPromptInputs, PromptError> {
    if catalog.is_empty() {
        return Err(PromptError::EmptyCatalog);
    }
    if gold.test_inventory.is_empty() {
        return Err(PromptError::EmptyInventory);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_directions = rng.random_range(1..=MAX_DIRECTIONS).min(catalog.len());
    let directions: Vec<InterventionDirection> =
        catalog.directions().choose_multiple(&mut rng, n_directions).cloned().collect();

    let inventory = &gold.test_inventory;
    let amount = inventory.len().min(CANDIDATE_QUOTA);
    let mut picked = index::sample(&mut rng, inventory.len(), amount).into_vec();
    picked.sort_unstable();
    let candidate_tests = picked.into_iter().map(|i| inventory[i].clone()).collect();

    Ok(DegradationPromptInputs { candidate_tests, directions, previous_titles: pool.snapshot() })
}

fn test_lines(tests: &[TestId]) -> String {
    tests.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("\n")
}

fn direction_lines(directions: &[InterventionDirection]) -> String {
    directions.iter().map(|d| format!("- {}: {}", d.label, d.description)).collect::<Vec<_>>().join("\n")
}

/// Renders the initial generation prompt, or the refinement prompt over `draft`.
pub fn build_degradation_prompt(
    inputs: &DegradationPromptInputs,
    stage: PromptStage,
    draft: Option<&InversionTaskSpec>,
) -> Result<String, PromptError> {
    use templates::*;
    match stage {
        PromptStage::Initial => {
            let candidates = test_lines(&inputs.candidate_tests);
            let directions = direction_lines(&inputs.directions);
            let titles = py_list_repr(&inputs.previous_titles);
            Ok(fill(
                DEGRADATION_PROMPT_INITIAL,
                &[
                    (P_CANDIDATES, &candidates),
                    (P_DIRECTIONS, &directions),
                    (P_MORE_EXAMPLES, ""),
                    (P_PREVIOUS_TITLES, &titles),
                ],
                Indent::None,
            ))
        }
        PromptStage::Refine => {
            let draft = draft.ok_or(PromptError::MissingDraft)?;
            let targets: Vec<String> = draft.selected_uts.iter().map(|t| t.to_string()).collect();
            let targets = py_list_repr(&targets);
            let rendered = render_task_spec(draft);
            Ok(fill(DEGRADATION_PROMPT_REFINE, &[(P_TARGET_UTS, &targets), (P_DRAFT, &rendered)], Indent::None))
        }
    }
}

/// The `task.yaml` instruction handed to the degradation agent.
pub fn render_degradation_instruction(spec: &InversionTaskSpec) -> String {
    use templates::*;
    let uts: Vec<String> = spec.selected_uts.iter().map(|t| t.to_string()).collect();
    fill(
        DEGRADATION_INSTRUCTION,
        &[(P_DEGRADATION_ISSUE, spec.task_description.trim()), (P_UTS, &uts.join(" "))],
        Indent::Hanging,
    )
}

/// The repair task's `task.yaml`: a literal block scalar indented two spaces.
pub fn render_repair_instruction(problem_statement: &str) -> String {
    use templates::*;
    let body = templates::indent_block(problem_statement.trim_end_matches('\n'), 2);
    fill(REPAIR_INSTRUCTION, &[(P_PROBLEM_STATEMENT, &body)], Indent::None)
}

/// Inverse of [`render_repair_instruction`].
pub fn parse_repair_instruction(yaml: &str) -> Option<String> {
    let rest = yaml.strip_prefix("instruction: |\n")?;
    let rest = rest.strip_suffix('\n')?;
    let mut lines = Vec::new();
    for line in rest.split('\n') {
        if line.is_empty() {
            lines.push("");
        } else {
            lines.push(line.strip_prefix("  ")?);
        }
    }
    Some(lines.join("\n"))
}

/// Whether to apply the refinement stage, drawn from `seed`.
pub fn should_refine(seed: u64, probability: f64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.random_bool(probability.clamp(0.0, 1.0))
}
