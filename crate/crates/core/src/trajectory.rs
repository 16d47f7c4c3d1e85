//! Solver trajectories: collection on packaged tasks, quality filtering, export.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{drive, AgentAdapter, DriveLimits, Step, StepSource};
use crate::packager::TaskInstance;
use crate::sandbox::{BuildOptions, SandboxBackend, SandboxError};
use crate::testrun::classify_outcomes;

/// Trajectories with fewer agent steps than this are dropped.
pub const MIN_AGENT_STEPS: usize = 20;
pub const DEFAULT_CHEAT_RULES: &str = include_str!("../config/cheat_rules.txt");
pub const DATASET_FILE: &str = "trajectories.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("trajectory {0} is not successful")]
    NotSuccessful(String),
    #[error("cheat rule on line {line}: {reason}")]
    BadRule { line: usize, reason: String },
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("i/o failure at {path}: {source}")]
    IoFailure { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrajectoryError + '_ {
    move |source| TrajectoryError::IoFailure { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterVerdict {
    Kept,
    DroppedShort,
    DroppedCheat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub repo: String,
    pub steps: Vec<Step>,
    /// Set from the test run after the agent stopped, never from the agent.
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_verdict: Option<FilterVerdict>,
    /// Label of the first cheat rule that matched.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cheat_rule: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_error: Option<String>,
}

impl Trajectory {
    pub fn agent_step_count(&self) -> usize {
        self.steps.iter().filter(|s| s.source == StepSource::Agent).count()
    }
}

/// Runs the solver on a task and verifies it in the same session.
/// An agent crash yields an unsuccessful trajectory rather than an error.
pub fn collect_trajectory(
    instance: &TaskInstance,
    agent: &mut dyn AgentAdapter,
    backend: &dyn SandboxBackend,
    limits: &DriveLimits,
) -> Result<Trajectory, TrajectoryError> {
    let poor = instance.poor_state().map_err(|e| SandboxError::BuildFailed(e.to_string()))?;
    let handle = backend.build_state(&poor, &BuildOptions::default())?;
    let result = (|| {
        let outcome = drive(agent, backend, &handle, &instance.problem_statement, limits)?;
        let selected = instance.selected_tests();
        let report = backend.run_test_script(&handle, &selected)?;
        let c = classify_outcomes(&selected, &report);
        let success = instance.fail_to_pass.iter().chain(&instance.pass_to_pass).all(|t| c.pass_to_pass.contains(t));
        Ok::<_, SandboxError>((outcome, success))
    })();
    backend.teardown(&handle);
    let (outcome, success) = result?;
    Ok(Trajectory {
        task_id: instance.instance_id.clone(),
        repo: instance.repo.clone(),
        steps: outcome.steps,
        success,
        filter_verdict: None,
        cheat_rule: None,
        agent_error: outcome.crashed,
    })
}

#[derive(Debug, Clone)]
pub struct CheatRule {
    pub label: String,
    pub pattern: Regex,
}

/// Regex rules over executed commands and viewed paths.
#[derive(Debug, Clone)]
pub struct CheatRules {
    rules: Vec<CheatRule>,
}

impl Default for CheatRules {
    fn default() -> Self {
        Self::parse(DEFAULT_CHEAT_RULES).expect("default cheat rules compile")
    }
}

impl CheatRules {
    /// One `label regex` pair per line; blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Result<Self, TrajectoryError> {
        let mut rules = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| TrajectoryError::BadRule { line: i + 1, reason };
            let (label, pattern) =
                line.split_once(char::is_whitespace).ok_or_else(|| bad("expected `label regex`".into()))?;
            let pattern = Regex::new(pattern.trim()).map_err(|e| bad(e.to_string()))?;
            rules.push(CheatRule { label: label.to_string(), pattern });
        }
        Ok(Self { rules })
    }

    pub fn load(path: &Path) -> Result<Self, TrajectoryError> {
        Self::parse(&std::fs::read_to_string(path).map_err(io(path))?)
    }

    pub fn rules(&self) -> &[CheatRule] {
        &self.rules
    }

    /// Label of the first rule matching any agent command or viewed path.
    pub fn first_match(&self, steps: &[Step]) -> Option<&str> {
        let subjects: Vec<String> = steps
            .iter()
            .filter(|s| s.source == StepSource::Agent)
            .flat_map(|s| [s.command(), s.viewed_path()])
            .flatten()
            .collect();
        self.rules.iter().find(|r| subjects.iter().any(|s| r.pattern.is_match(s))).map(|r| r.label.as_str())
    }
}

/// Splits successful trajectories into kept and dropped. The step minimum is
/// checked before the cheat rules.
pub fn filter_trajectories(
    trajectories: Vec<Trajectory>,
    rules: &CheatRules,
) -> Result<(Vec<Trajectory>, Vec<Trajectory>), TrajectoryError> {
    if let Some(t) = trajectories.iter().find(|t| !t.success) {
        return Err(TrajectoryError::NotSuccessful(t.task_id.clone()));
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for mut t in trajectories {
        t.cheat_rule = None;
        if t.agent_step_count() < MIN_AGENT_STEPS {
            t.filter_verdict = Some(FilterVerdict::DroppedShort);
            dropped.push(t);
        } else if let Some(label) = rules.first_match(&t.steps) {
            t.cheat_rule = Some(label.to_string());
            t.filter_verdict = Some(FilterVerdict::DroppedCheat);
            dropped.push(t);
        } else {
            t.filter_verdict = Some(FilterVerdict::Kept);
            kept.push(t);
        }
    }
    Ok((kept, dropped))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub per_repo: BTreeMap<String, usize>,
    pub total_agent_steps: usize,
    pub file: String,
    pub sha256: String,
}

/// Writes the trajectories as JSON lines sorted by task id, plus a manifest.
pub fn export_dataset(kept: &[Trajectory], out: &Path) -> Result<DatasetManifest, TrajectoryError> {
    std::fs::create_dir_all(out).map_err(io(out))?;
    let mut sorted: Vec<&Trajectory> = kept.iter().collect();
    sorted.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    let mut body = String::new();
    let mut per_repo = BTreeMap::new();
    for t in &sorted {
        body.push_str(&serde_json::to_string(t).expect("trajectory serializes"));
        body.push('\n');
        *per_repo.entry(t.repo.clone()).or_insert(0) += 1;
    }
    let data = out.join(DATASET_FILE);
    std::fs::write(&data, &body).map_err(io(&data))?;
    let manifest = DatasetManifest {
        count: sorted.len(),
        per_repo,
        total_agent_steps: sorted.iter().map(|t| t.agent_step_count()).sum(),
        file: DATASET_FILE.to_string(),
        sha256: crate::util::sha256_hex(body.as_bytes()),
    };
    let path = out.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(io(&path))?;
    Ok(manifest)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Trajectory>, TrajectoryError> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| TrajectoryError::Malformed {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn save_trajectory(t: &Trajectory, dir: &Path) -> Result<PathBuf, TrajectoryError> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let path = dir.join(format!("{}.json", t.task_id));
    std::fs::write(&path, serde_json::to_string_pretty(t).expect("trajectory serializes")).map_err(io(&path))?;
    Ok(path)
}

/// Every `*.json` trajectory in `dir`, sorted by file name.
pub fn load_trajectories(dir: &Path) -> Result<Vec<Trajectory>, TrajectoryError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(io(p))?;
            serde_json::from_str(&text)
                .map_err(|e| TrajectoryError::Malformed { path: p.clone(), reason: e.to_string() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::AgentAction;

    fn agent_step(id: u64, action: AgentAction) -> Step {
        action.step(id, "")
    }

    fn traj(task: &str, commands: &[&str]) -> Trajectory {
        let steps = commands
            .iter()
            .enumerate()
            .map(|(i, c)| agent_step(i as u64 + 1, AgentAction::Run { command: c.to_string() }))
            .collect();
        Trajectory {
            task_id: task.into(),
            repo: "r".into(),
            steps,
            success: true,
            filter_verdict: None,
            cheat_rule: None,
            agent_error: None,
        }
    }

    #[test]
    fn default_rules_flag_shortcuts() {
        let rules = CheatRules::default();
        let hit =
            |c: &str| rules.first_match(&[agent_step(1, AgentAction::Run { command: c.into() })]).map(str::to_string);
        assert_eq!(hit("cat /testbed/.git/ORIG_HEAD").as_deref(), Some("git-metadata"));
        assert_eq!(hit("git log -p -- setup.py").as_deref(), Some("git-history"));
        assert_eq!(hit("ls /opt/miniconda3/pkgs/").as_deref(), Some("conda-package-cache"));
        assert_eq!(hit("cat /opt/miniconda3/envs/testbed/conda-meta/history").as_deref(), Some("conda-history"));
        assert_eq!(hit("cp lib.so.bak lib.so").as_deref(), Some("backup-file"));
        assert_eq!(hit("cat /tmp/zlib_backup/libz.so").as_deref(), Some("tmp-backup"));
        assert_eq!(hit("pytest -x tests/test_io.py"), None);
        assert_eq!(hit("ls /tmp"), None);
        let view = agent_step(1, AgentAction::ReadFile { path: "/testbed/.git/config".into() });
        assert_eq!(rules.first_match(&[view]), Some("git-metadata"));
    }

    #[test]
    fn threshold_and_order() {
        let rules = CheatRules::default();
        let clean: Vec<&str> = vec!["ls"; 20];
        let mut short = traj("a", &clean[..19]);
        short.steps[0] = agent_step(1, AgentAction::Run { command: "cat .git/HEAD".into() });
        let (kept, dropped) = filter_trajectories(
            vec![short, traj("b", &clean), traj("c", &[&clean[..19], &["cat x.bak"]].concat())],
            &rules,
        )
        .unwrap();
        assert_eq!(kept.iter().map(|t| t.task_id.as_str()).collect::<Vec<_>>(), ["b"]);
        assert_eq!(dropped[0].filter_verdict, Some(FilterVerdict::DroppedShort));
        assert_eq!(dropped[1].filter_verdict, Some(FilterVerdict::DroppedCheat));
        assert_eq!(filter_trajectories(kept.clone(), &rules).unwrap(), (kept, vec![]));
    }

    #[test]
    fn unsuccessful_input_rejected() {
        let mut t = traj("a", &["ls"]);
        t.success = false;
        assert!(matches!(filter_trajectories(vec![t], &CheatRules::default()), Err(TrajectoryError::NotSuccessful(_))));
    }

    #[test]
    fn bad_rule_file() {
        assert!(matches!(CheatRules::parse("lonely"), Err(TrajectoryError::BadRule { line: 1, .. })));
        assert!(matches!(CheatRules::parse("# c\nx (unclosed"), Err(TrajectoryError::BadRule { line: 2, .. })));
    }

    #[test]
    fn export_roundtrip_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let empty = export_dataset(&[], dir.path()).unwrap();
        assert_eq!(empty.count, 0);
        assert_eq!(std::fs::read_to_string(dir.path().join(DATASET_FILE)).unwrap(), "");
        let ts = vec![traj("c", &["ls"]), traj("a", &["ls", "pwd"]), traj("b", &[])];
        let m = export_dataset(&ts, dir.path()).unwrap();
        assert_eq!(m.count, 3);
        assert_eq!(m.per_repo["r"], 3);
        let back = read_dataset(&dir.path().join(DATASET_FILE)).unwrap();
        assert_eq!(back.iter().map(|t| t.task_id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(back[0], ts[1]);
    }
}
