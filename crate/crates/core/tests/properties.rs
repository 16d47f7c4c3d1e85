use std::collections::BTreeSet;

use proptest::prelude::*;

use envinvert_core::agent::{FunctionCall, Step, StepSource};
use envinvert_core::packager::{emit_bundle, load_and_validate, Provenance, TaskInstance};
use envinvert_core::prompt::{strip_hint, GuidanceLevel, IssueStatement};
use envinvert_core::stats::RunningMean;
use envinvert_core::trajectory::{filter_trajectories, CheatRules, FilterVerdict, Trajectory};
use envinvert_core::{
    classify_outcomes, compose_deltas, BaseImageRef, CodePatch, EnvDelta, EnvironmentState, RunnerStatus, TestId,
    TestOutcome, TestRecord, TestRunReport, Verdict,
};

fn line() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-z]{1,10}".prop_map(|w| format!("RUN echo {w}")),
        ("[A-Z]{1,6}", "[a-z0-9]{0,6}").prop_map(|(k, v)| format!("ENV {k}={v}")),
        "[a-z]{1,8}".prop_map(|f| format!("RUN rm -f /opt/{f}.so && true")),
    ]
}

fn patch() -> impl Strategy<Value = CodePatch> {
    ("[a-z]{1,8}", ".{0,40}").prop_map(|(p, content)| CodePatch { path: format!("pkg/{p}.py"), content })
}

fn delta() -> impl Strategy<Value = EnvDelta> {
    (prop::collection::vec(line(), 1..4), prop::collection::vec(patch(), 0..3))
        .prop_map(|(lines, patches)| EnvDelta::new(lines, patches).unwrap())
}

fn root_state() -> impl Strategy<Value = EnvironmentState> {
    ("[a-z]{1,8}", "[0-9a-f]{7}").prop_map(|(repo, sha)| {
        EnvironmentState::new(BaseImageRef::new(format!("task-{repo}"), "latest").unwrap(), format!("{repo}@{sha}"))
            .unwrap()
    })
}

fn outcome() -> impl Strategy<Value = Option<TestOutcome>> {
    prop_oneof![
        Just(None),
        Just(Some(TestOutcome::Passed)),
        Just(Some(TestOutcome::Failed)),
        Just(Some(TestOutcome::Errored)),
        Just(Some(TestOutcome::Skipped)),
    ]
}

fn agent_step(id: u64, command: &str) -> Step {
    Step {
        id,
        source: StepSource::Agent,
        message: String::new(),
        action: "execute_bash".into(),
        function: Some(FunctionCall {
            name: "execute_bash".into(),
            arguments: serde_json::json!({ "command": command }).to_string(),
        }),
    }
}

fn trajectory() -> impl Strategy<Value = Trajectory> {
    let command = prop_oneof![
        Just("ls /testbed".to_string()),
        Just("python -m pytest tests".to_string()),
        Just("git log -p".to_string()),
        Just("ls /opt/miniconda3/pkgs/".to_string()),
        Just("cat /testbed/.gitignore".to_string()),
        "[a-z]{1,6}".prop_map(|w| format!("echo {w}")),
    ];
    ("[a-z]{1,6}", prop::collection::vec(command, 0..30)).prop_map(|(name, cmds)| Trajectory {
        task_id: format!("repo__{name}"),
        repo: "repo".into(),
        steps: cmds.iter().enumerate().map(|(i, c)| agent_step(i as u64, c)).collect(),
        success: true,
        filter_verdict: None,
        cheat_rule: None,
        agent_error: None,
    })
}

proptest! {
    #[test]
    fn state_document_round_trips(root in root_state(), deltas in prop::collection::vec(delta(), 0..4)) {
        let state = deltas.iter().try_fold(root, |s, d| s.apply_delta(d)).unwrap();
        let back = EnvironmentState::parse(&state.serialize()).unwrap();
        prop_assert_eq!(back.fingerprint(), state.fingerprint());
        prop_assert_eq!(&back, &state);
    }

    #[test]
    fn composed_delta_matches_sequential_application(root in root_state(), a in delta(), b in delta(), c in delta()) {
        let step_by_step = root.apply_delta(&a).unwrap().apply_delta(&b).unwrap().apply_delta(&c).unwrap();
        let left = root.apply_delta(&compose_deltas(&compose_deltas(&a, &b).unwrap(), &c).unwrap()).unwrap();
        let right = root.apply_delta(&compose_deltas(&a, &compose_deltas(&b, &c).unwrap()).unwrap()).unwrap();
        prop_assert_eq!(left.fingerprint(), step_by_step.fingerprint());
        prop_assert_eq!(right.fingerprint(), step_by_step.fingerprint());
        prop_assert_eq!(step_by_step.root(), root);
    }

    #[test]
    fn hint_split_recovers_body_and_hint(
        body in "[A-Za-z][A-Za-z .,\n]{0,80}",
        hint in "[A-Za-z][A-Za-z .,]{0,40}",
    ) {
        prop_assume!(!body.lines().any(|l| l.trim_start().to_lowercase().starts_with("hint")));
        let joined = format!("{body}\nHint:\n{hint}");
        let (b, h) = strip_hint(&joined);
        prop_assert_eq!(b, body.trim_end());
        prop_assert_eq!(h.as_deref(), Some(hint.trim()));
        let (plain, none) = strip_hint(&body);
        prop_assert_eq!(plain, body.clone());
        prop_assert!(none.is_none());

        let issue = IssueStatement::from_llm_output(&joined, GuidanceLevel::Weak).unwrap();
        prop_assert_eq!(strip_hint(&issue.problem_statement(true)).0, issue.body.clone());
        prop_assert_eq!(issue.problem_statement(false), issue.body.clone());
    }

    #[test]
    fn classification_partitions_the_selection(
        assigned in prop::collection::vec(outcome(), 1..12),
        unselected in prop::collection::vec(outcome(), 0..4),
        completed in any::<bool>(),
    ) {
        let id = |p: &str, i: usize| -> TestId { format!("tests/{p}.py::t{i}").parse().unwrap() };
        let selected: Vec<TestId> = (0..assigned.len()).map(|i| id("sel", i)).collect();
        let mut records: Vec<TestRecord> = assigned
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.map(|outcome| TestRecord { id: id("sel", i), outcome }))
            .collect();
        records.extend(unselected.iter().enumerate().filter_map(|(i, o)| o.map(|outcome| TestRecord { id: id("other", i), outcome })));
        let report = TestRunReport {
            records,
            runner_status: if completed { RunnerStatus::Completed } else { RunnerStatus::CommandFailed },
            raw_log_path: None,
            duration: 1.0,
        };
        let c = classify_outcomes(&selected, &report);
        let all: BTreeSet<TestId> = selected.iter().cloned().collect();
        prop_assert!(c.fail_to_pass.is_disjoint(&c.pass_to_pass));
        prop_assert!(c.fail_to_pass.is_subset(&all) && c.pass_to_pass.is_subset(&all));
        prop_assert_eq!(c.verdict == Verdict::Discard, c.fail_to_pass.is_empty());
        if !completed {
            prop_assert_eq!(&c.fail_to_pass, &all);
        }
    }

    #[test]
    fn filtering_partitions_and_is_idempotent(batch in prop::collection::vec(trajectory(), 0..8)) {
        let rules = CheatRules::default();
        let n = batch.len();
        let (kept, dropped) = filter_trajectories(batch, &rules).unwrap();
        prop_assert_eq!(kept.len() + dropped.len(), n);
        prop_assert!(kept.iter().all(|t| t.filter_verdict == Some(FilterVerdict::Kept) && t.cheat_rule.is_none()));
        prop_assert!(dropped.iter().all(|t| t.filter_verdict != Some(FilterVerdict::Kept)));
        let (again, none) = filter_trajectories(kept.clone(), &rules).unwrap();
        prop_assert!(none.is_empty());
        prop_assert_eq!(again, kept);
    }

    #[test]
    fn running_mean_matches_batch_mean(xs in prop::collection::vec(-1e6f64..1e6, 1..300)) {
        let mut m = RunningMean::default();
        xs.iter().for_each(|x| m.push(*x));
        let batch = xs.iter().sum::<f64>() / xs.len() as f64;
        let scale = xs.iter().fold(1.0f64, |a, x| a.max(x.abs()));
        prop_assert!((m.mean() - batch).abs() <= 1e-9 * scale);
        prop_assert_eq!(m.count(), xs.len() as u64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bundles_round_trip(
        root in root_state(),
        d in delta(),
        n_tests in 1usize..8,
        split in 0usize..8,
        statement in "[A-Za-z][A-Za-z .\n]{0,60}[A-Za-z.]?",
    ) {
        let split = split.min(n_tests - 1) + 1;
        let tests: Vec<TestId> = (0..n_tests).map(|i| format!("tests/test_p.py::t{i}").parse().unwrap()).collect();
        let poor = root.apply_delta(&d).unwrap();
        let instance = TaskInstance {
            instance_id: TaskInstance::make_id("repo", "prop task", &poor, &statement),
            repo: "repo".into(),
            task_name: "prop task".into(),
            base: root.base().clone(),
            codebase_ref: root.codebase_ref().to_string(),
            delta: d,
            problem_statement: statement,
            hint_present: false,
            guidance_level: GuidanceLevel::Balanced,
            fail_to_pass: tests[..split].iter().cloned().collect(),
            pass_to_pass: tests[split..].iter().cloned().collect(),
            provenance: Provenance::default(),
        };
        let dir = tempfile::tempdir().unwrap();
        if instance.problem_statement.trim() != instance.problem_statement {
            prop_assert!(emit_bundle(&instance, dir.path()).is_err());
        } else {
            let bundle = emit_bundle(&instance, dir.path()).unwrap();
            prop_assert_eq!(load_and_validate(&bundle.root).unwrap(), instance);
        }
    }
}
