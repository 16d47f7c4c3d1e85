//! Environment inversion: drive a degradation agent on a gold sandbox, turn its
//! build-file summary into a delta, and verify the failures on fresh rebuilds.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{drive, AgentAdapter, DriveLimits, Step};
use crate::dockerfile::ingest;
use crate::packager::{Provenance, TaskInstance};
use crate::prompt::{render_degradation_instruction, InversionTaskSpec, IssueStatement};
use crate::sandbox::{BuildOptions, SandboxBackend, SandboxError};
use crate::state::{BaseImageRef, EnvDelta, EnvironmentState, GoldInstance, TestId};
use crate::testrun::{classify_outcomes, Classification, Verdict};

/// Where the degradation agent must leave its summary.
pub const SUMMARY_PATH: &str = "/logs/Dockerfile";
pub const TRAJECTORY_FILE: &str = "trajectory.json";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("agent finished without writing {SUMMARY_PATH}")]
    NoDockerfileWritten,
    #[error("agent crashed: {0}")]
    AgentCrashed(String),
    #[error("summary is not a usable delta: {0}")]
    InvalidDockerfile(String),
    #[error("gold environment has failing tests: {0:?}")]
    GoldNotHealthy(Vec<String>),
    #[error("run was not accepted")]
    NotAccepted,
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("artifact i/o at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// What the degradation agent left behind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegradationRecord {
    pub delta: EnvDelta,
    pub spec: InversionTaskSpec,
    pub raw_dockerfile_text: String,
    /// Actions the agent took before finishing.
    pub agent_steps: usize,
    #[serde(default)]
    pub steps: Vec<Step>,
    /// Directives removed at ingest (base image lines).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped_directives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRef {
    pub repo: String,
    pub base: BaseImageRef,
    pub codebase_ref: String,
}

impl GoldRef {
    pub fn of(gold: &GoldInstance) -> Self {
        Self {
            repo: gold.repo_name.clone(),
            base: gold.state.base().clone(),
            codebase_ref: gold.state.codebase_ref().to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reproduction {
    Reproduced,
    Diverged,
    Unchecked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    BuildFailed,
    AllPass,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum RunVerdict {
    Accepted,
    Discarded { reason: DiscardReason },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InversionRun {
    pub gold: GoldRef,
    pub record: DegradationRecord,
    pub classification: Classification,
    pub reproduction: Reproduction,
    pub verdict: RunVerdict,
}

impl InversionRun {
    pub fn accepted(&self) -> bool {
        self.verdict == RunVerdict::Accepted
    }

    pub fn poor_state(&self) -> Result<EnvironmentState, HarnessError> {
        let gold = EnvironmentState::new(self.gold.base.clone(), self.gold.codebase_ref.clone())
            .map_err(|e| HarnessError::InvalidDockerfile(e.to_string()))?;
        gold.apply_delta(&self.record.delta).map_err(|e| HarnessError::InvalidDockerfile(e.to_string()))
    }
}

#[derive(Debug, Clone, Default)]
pub struct InversionOptions {
    pub limits: DriveLimits,
    /// Host directory mounted at `/logs`; a temporary one when unset.
    pub artifact_dir: Option<PathBuf>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// Turns summary text into a delta: continuations joined, comments dropped,
/// base image lines removed.
pub fn delta_from_summary(text: &str) -> Result<(EnvDelta, Vec<String>), HarnessError> {
    let ingested = ingest(text);
    if ingested.lines.is_empty() {
        return Err(HarnessError::NoDockerfileWritten);
    }
    let delta =
        EnvDelta::new(ingested.lines, Vec::new()).map_err(|e| HarnessError::InvalidDockerfile(e.to_string()))?;
    Ok((delta, ingested.dropped))
}

/// Lets the agent degrade a sandbox built from `gold`, then reads back its summary.
/// The session is always torn down.
pub fn run_inversion(
    gold: &GoldInstance,
    spec: &InversionTaskSpec,
    agent: &mut dyn AgentAdapter,
    backend: &dyn SandboxBackend,
    options: &InversionOptions,
) -> Result<DegradationRecord, HarnessError> {
    let scratch;
    let logs_dir = match &options.artifact_dir {
        Some(dir) => dir.clone(),
        None => {
            scratch = tempfile::tempdir().map_err(io(Path::new("<tmp>")))?;
            scratch.path().to_path_buf()
        }
    };
    std::fs::create_dir_all(&logs_dir).map_err(io(&logs_dir))?;
    let stale = logs_dir.join("Dockerfile");
    if stale.exists() {
        std::fs::remove_file(&stale).map_err(io(&stale))?;
    }

    let handle = backend.build_state(&gold.state, &BuildOptions::with_logs(&logs_dir))?;
    let instruction = render_degradation_instruction(spec);
    let outcome = drive(agent, backend, &handle, &instruction, &options.limits);
    let summary = outcome.as_ref().ok().map(|_| backend.read_file(&handle, SUMMARY_PATH));
    backend.teardown(&handle);
    let outcome = outcome?;

    if options.artifact_dir.is_some() {
        let path = logs_dir.join(TRAJECTORY_FILE);
        let json = serde_json::to_string_pretty(&outcome.steps).expect("steps serialize");
        std::fs::write(&path, json).map_err(io(&path))?;
    }
    tracing::info!(
        task = %spec.task_name,
        actions = outcome.agent_actions,
        finished = outcome.finished,
        budget_exhausted = outcome.budget_exhausted,
        "degradation loop ended"
    );
    if let Some(log) = outcome.crashed {
        return Err(HarnessError::AgentCrashed(log));
    }

    let raw = summary.expect("summary read after a clean loop")?.ok_or(HarnessError::NoDockerfileWritten)?;
    let (delta, dropped_directives) = delta_from_summary(&raw)?;
    let agent_steps = outcome.agent_actions - usize::from(outcome.finished);
    Ok(DegradationRecord {
        delta,
        spec: spec.clone(),
        raw_dockerfile_text: raw,
        agent_steps,
        steps: outcome.steps,
        dropped_directives,
    })
}

/// Fresh build of `state`, one test run, teardown.
fn fresh_classification(
    backend: &dyn SandboxBackend,
    state: &EnvironmentState,
    selected: &[TestId],
) -> Result<Classification, SandboxError> {
    let handle = backend.build_state(state, &BuildOptions::default().fresh())?;
    let report = backend.run_test_script(&handle, selected);
    backend.teardown(&handle);
    Ok(classify_outcomes(selected, &report?))
}

fn is_build_error(e: &SandboxError) -> bool {
    matches!(e, SandboxError::BuildFailed(_) | SandboxError::UnknownSimOp(_))
}

/// Classifies the delta on a fresh build and checks that a second fresh build
/// fails the same tests. The agent's own session plays no part.
pub fn verify_and_classify(
    gold: &GoldInstance,
    record: &DegradationRecord,
    backend: &dyn SandboxBackend,
) -> Result<InversionRun, HarnessError> {
    let gold_ref = GoldRef::of(gold);
    let selected = &record.spec.selected_uts;
    let discarded = |classification, reproduction, reason| InversionRun {
        gold: gold_ref.clone(),
        record: record.clone(),
        classification,
        reproduction,
        verdict: RunVerdict::Discarded { reason },
    };
    let empty =
        Classification { fail_to_pass: BTreeSet::new(), pass_to_pass: BTreeSet::new(), verdict: Verdict::Discard };

    let poor = gold.state.apply_delta(&record.delta).map_err(|e| HarnessError::InvalidDockerfile(e.to_string()))?;
    let first = match fresh_classification(backend, &poor, selected) {
        Ok(c) => c,
        Err(e) if is_build_error(&e) => {
            tracing::info!(task = %record.spec.task_name, error = %e, "delta does not build");
            return Ok(discarded(empty, Reproduction::Unchecked, DiscardReason::BuildFailed));
        }
        Err(e) => return Err(e.into()),
    };
    if first.verdict == Verdict::Discard {
        return Ok(discarded(first, Reproduction::Unchecked, DiscardReason::AllPass));
    }
    let reproduced = match fresh_classification(backend, &poor, selected) {
        Ok(second) => second.fail_to_pass == first.fail_to_pass,
        Err(e) if is_build_error(&e) => false,
        Err(e) => return Err(e.into()),
    };
    if !reproduced {
        return Ok(discarded(first, Reproduction::Diverged, DiscardReason::Diverged));
    }
    Ok(InversionRun {
        gold: gold_ref,
        record: record.clone(),
        classification: first,
        reproduction: Reproduction::Reproduced,
        verdict: RunVerdict::Accepted,
    })
}

/// One repair task with the hint, and a second without it when there is one.
pub fn assemble_instance(
    run: &InversionRun,
    issue: &IssueStatement,
    provenance: &Provenance,
) -> Result<Vec<TaskInstance>, HarnessError> {
    if !run.accepted() {
        return Err(HarnessError::NotAccepted);
    }
    let poor = run.poor_state()?;
    let task_name = run.record.spec.task_name.clone();
    let variants: &[bool] = if issue.hint.is_some() { &[true, false] } else { &[false] };
    Ok(variants
        .iter()
        .map(|&with_hint| {
            let statement = issue.problem_statement(with_hint);
            TaskInstance {
                instance_id: TaskInstance::make_id(&run.gold.repo, &task_name, &poor, &statement),
                repo: run.gold.repo.clone(),
                task_name: task_name.clone(),
                base: run.gold.base.clone(),
                codebase_ref: run.gold.codebase_ref.clone(),
                delta: run.record.delta.clone(),
                problem_statement: statement,
                hint_present: with_hint,
                guidance_level: issue.guidance_level,
                fail_to_pass: run.classification.fail_to_pass.clone(),
                pass_to_pass: run.classification.pass_to_pass.clone(),
                provenance: provenance.clone(),
            }
        })
        .collect())
}

/// Confirms every inventory test passes on a fresh gold build.
pub fn verify_gold(gold: &GoldInstance, backend: &dyn SandboxBackend) -> Result<(), HarnessError> {
    let c = fresh_classification(backend, &gold.state, &gold.test_inventory)?;
    let not_passing: Vec<String> =
        gold.test_inventory.iter().filter(|t| !c.pass_to_pass.contains(*t)).map(|t| t.to_string()).collect();
    if not_passing.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::GoldNotHealthy(not_passing))
    }
}

/// Result of rebuilding a packaged task from scratch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reverification {
    pub observed: Classification,
    pub fail_to_pass_matches: bool,
    pub pass_to_pass_matches: bool,
}

impl Reverification {
    pub fn holds(&self) -> bool {
        self.fail_to_pass_matches && self.pass_to_pass_matches
    }
}

/// Rebuilds the task's poor state and compares the observed sets with the recorded ones.
pub fn reverify_instance(
    instance: &TaskInstance,
    backend: &dyn SandboxBackend,
) -> Result<Reverification, HarnessError> {
    let poor = instance.poor_state().map_err(|e| HarnessError::InvalidDockerfile(e.to_string()))?;
    let observed = fresh_classification(backend, &poor, &instance.selected_tests())?;
    Ok(Reverification {
        fail_to_pass_matches: observed.fail_to_pass == instance.fail_to_pass,
        pass_to_pass_matches: observed.pass_to_pass == instance.pass_to_pass,
        observed,
    })
}

/// Whether every selected test passed.
pub fn all_pass(selected: &[TestId], classification: &Classification) -> bool {
    selected.iter().all(|t| classification.pass_to_pass.contains(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{AgentAction, ScriptedAgent};
    use crate::prompt::GuidanceLevel;
    use crate::sandbox::{Predicate, SimBackend, SimPackage, SimScenario, SimTest};
    use crate::testrun::TestOutcome;

    fn scenario() -> SimScenario {
        let mut packages = std::collections::BTreeMap::new();
        packages.insert("zlib".to_string(), SimPackage::default());
        packages.insert("numpy".to_string(), SimPackage::default());
        SimScenario {
            repo: "demo".into(),
            base: "task-demo:latest".parse().unwrap(),
            codebase_ref: "demo@1".into(),
            files: Default::default(),
            packages,
            env: [("LANG".to_string(), "C.UTF-8".to_string())].into(),
            path: vec!["/usr/bin".into()],
            runner: Predicate::Always,
            tests: vec![
                SimTest {
                    id: "t/a.py::zip".parse().unwrap(),
                    requires: Predicate::pkg("zlib"),
                    fail_as: TestOutcome::Failed,
                },
                SimTest {
                    id: "t/a.py::gz".parse().unwrap(),
                    requires: Predicate::pkg("zlib"),
                    fail_as: TestOutcome::Errored,
                },
                SimTest {
                    id: "t/b.py::arr".parse().unwrap(),
                    requires: Predicate::pkg("numpy"),
                    fail_as: TestOutcome::Failed,
                },
                SimTest {
                    id: "t/c.py::flaky".parse().unwrap(),
                    requires: Predicate::Flaky { of: Box::new(Predicate::env("LANG", "C.UTF-8")) },
                    fail_as: TestOutcome::Failed,
                },
            ],
        }
    }

    fn spec(uts: &[&str]) -> InversionTaskSpec {
        InversionTaskSpec {
            task_name: "Break zlib".into(),
            category: "System".into(),
            selected_uts: uts.iter().map(|s| s.parse().unwrap()).collect(),
            task_description: "Corrupt zlib.".into(),
            expected_result: "Import errors".into(),
            recovery_strategy: "Restore zlib".into(),
        }
    }

    fn run(cmd: &str) -> AgentAction {
        AgentAction::Run { command: cmd.into() }
    }

    fn degrade(lines: &[&str]) -> Vec<AgentAction> {
        let mut script: Vec<AgentAction> = lines.iter().map(|l| run(l)).collect();
        let summary: String = lines.iter().map(|l| format!("RUN {l}\n")).collect();
        script.push(AgentAction::WriteFile { path: SUMMARY_PATH.into(), content: summary });
        script.push(AgentAction::Finish { message: "done".into() });
        script
    }

    fn record_for(lines: &[&str], uts: &[&str], backend: &SimBackend) -> DegradationRecord {
        let gold = scenario().gold_instance();
        let mut agent = ScriptedAgent::new(degrade(lines));
        run_inversion(&gold, &spec(uts), &mut agent, backend, &InversionOptions::default()).unwrap()
    }

    #[test]
    fn three_commands_give_three_line_delta() {
        let backend = SimBackend::new([scenario()]);
        let r = record_for(&["corrupt_lib zlib", "echo hi", "true"], &["t/a.py::zip"], &backend);
        assert_eq!(r.delta.dockerfile_lines().len(), 3);
        assert_eq!(r.agent_steps, 4);
        assert_eq!(r.delta.dockerfile_lines()[0], "RUN corrupt_lib zlib");
    }

    #[test]
    fn missing_or_empty_summary() {
        let backend = SimBackend::new([scenario()]);
        let gold = scenario().gold_instance();
        let mut agent = ScriptedAgent::new(vec![run("corrupt_lib zlib"), AgentAction::Finish { message: "x".into() }]);
        let err = run_inversion(&gold, &spec(&["t/a.py::zip"]), &mut agent, &backend, &InversionOptions::default());
        assert!(matches!(err, Err(HarnessError::NoDockerfileWritten)));

        let mut agent = ScriptedAgent::new(vec![
            AgentAction::WriteFile { path: SUMMARY_PATH.into(), content: "# nothing\n\n".into() },
            AgentAction::Finish { message: "x".into() },
        ]);
        let err = run_inversion(&gold, &spec(&["t/a.py::zip"]), &mut agent, &backend, &InversionOptions::default());
        assert!(matches!(err, Err(HarnessError::NoDockerfileWritten)));
    }

    #[test]
    fn never_finishing_agent_stops_at_budget() {
        let backend = SimBackend::new([scenario()]);
        let gold = scenario().gold_instance();
        let mut agent = ScriptedAgent::new(vec![run("sleep 100")]).repeat_last();
        let opts = InversionOptions { limits: DriveLimits { budget: 250.0, ..Default::default() }, artifact_dir: None };
        let err = run_inversion(&gold, &spec(&["t/a.py::zip"]), &mut agent, &backend, &opts);
        assert!(matches!(err, Err(HarnessError::NoDockerfileWritten)));
    }

    #[test]
    fn accepted_run_two_broken_one_kept() {
        let backend = SimBackend::new([scenario()]);
        let uts = ["t/a.py::zip", "t/a.py::gz", "t/b.py::arr"];
        let r = record_for(&["corrupt_lib zlib"], &uts, &backend);
        let gold = scenario().gold_instance();
        let run = verify_and_classify(&gold, &r, &backend).unwrap();
        assert_eq!(run.verdict, RunVerdict::Accepted);
        assert_eq!(run.reproduction, Reproduction::Reproduced);
        assert_eq!(run.classification.fail_to_pass.len(), 2);
        assert_eq!(run.classification.pass_to_pass.len(), 1);
    }

    #[test]
    fn harmless_delta_is_discarded() {
        let backend = SimBackend::new([scenario()]);
        let r = record_for(&["echo fine"], &["t/a.py::zip"], &backend);
        let run = verify_and_classify(&scenario().gold_instance(), &r, &backend).unwrap();
        assert_eq!(run.verdict, RunVerdict::Discarded { reason: DiscardReason::AllPass });
        assert_eq!(run.reproduction, Reproduction::Unchecked);
    }

    #[test]
    fn nondeterministic_failure_diverges() {
        let backend = SimBackend::new([scenario()]);
        let r = record_for(&["env_set LANG=C"], &["t/c.py::flaky", "t/b.py::arr"], &backend);
        let run = verify_and_classify(&scenario().gold_instance(), &r, &backend).unwrap();
        assert_eq!(run.verdict, RunVerdict::Discarded { reason: DiscardReason::Diverged });
        assert_eq!(run.reproduction, Reproduction::Diverged);
    }

    #[test]
    fn unbuildable_delta_is_discarded() {
        let backend = SimBackend::new([scenario()]);
        let record = DegradationRecord {
            delta: EnvDelta::new(vec!["RUN frobnicate".into()], vec![]).unwrap(),
            spec: spec(&["t/a.py::zip"]),
            raw_dockerfile_text: "RUN frobnicate\n".into(),
            agent_steps: 1,
            steps: vec![],
            dropped_directives: vec![],
        };
        let run = verify_and_classify(&scenario().gold_instance(), &record, &backend).unwrap();
        assert_eq!(run.verdict, RunVerdict::Discarded { reason: DiscardReason::BuildFailed });
    }

    #[test]
    fn hint_yields_two_instances_sharing_sets() {
        let backend = SimBackend::new([scenario()]);
        let r = record_for(&["corrupt_lib zlib"], &["t/a.py::zip", "t/b.py::arr"], &backend);
        let run = verify_and_classify(&scenario().gold_instance(), &r, &backend).unwrap();
        let with = IssueStatement::from_llm_output("zip fails\nHint:\nzlib", GuidanceLevel::Weak).unwrap();
        let out = assemble_instance(&run, &with, &Provenance::default()).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out[0].hint_present && !out[1].hint_present);
        assert_ne!(out[0].instance_id, out[1].instance_id);
        for x in &out {
            assert_eq!(x.fail_to_pass, run.classification.fail_to_pass);
            assert_eq!(x.pass_to_pass, run.classification.pass_to_pass);
            assert!(reverify_instance(x, &backend).unwrap().holds());
        }
        let without = IssueStatement::from_llm_output("zip fails", GuidanceLevel::Weak).unwrap();
        assert_eq!(assemble_instance(&run, &without, &Provenance::default()).unwrap().len(), 1);
    }

    #[test]
    fn gold_check() {
        let backend = SimBackend::new([scenario()]);
        verify_gold(&scenario().gold_instance(), &backend).unwrap();
        let mut broken = scenario();
        broken.packages.get_mut("numpy").unwrap().corrupted = true;
        let backend = SimBackend::new([broken.clone()]);
        assert!(
            matches!(verify_gold(&broken.gold_instance(), &backend), Err(HarnessError::GoldNotHealthy(v)) if v.len() == 1)
        );
    }
}
