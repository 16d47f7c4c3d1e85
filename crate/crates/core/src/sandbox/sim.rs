use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    check_mounts, host_path_for, keep_log, BackendKind, BuildOptions, ExecResult, MountSpec, SandboxBackend,
    SandboxError, SandboxHandle, CODEBASE_ROOT, KILLED_EXIT_CODE,
};
use crate::dockerfile::instruction;
use crate::state::{BaseImageRef, EnvironmentState, GoldInstance, TestId};
use crate::testrun::{parse_verbose_log, TestOutcome, TestRunReport};

/// Commands the simulated shell understands. The first six are the
/// degradation vocabulary; the rest repair, inspect, or are shell basics.
pub const SIM_VERBS: &[&str] = &[
    "corrupt_lib",
    "rm",
    "chmod_deny",
    "env_unset",
    "patch_file",
    "break_path",
    "restore_lib",
    "chmod_allow",
    "env_set",
    "write_file",
    "add_path",
    "export",
    "unset",
    "cp",
    "mv",
    "cat",
    "ls",
    "echo",
    "true",
    "false",
    "sleep",
    "exit",
    "cd",
    "mkdir",
    "pytest",
];

/// Condition over the simulated environment deciding whether a test passes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predicate {
    Always,
    All {
        of: Vec<Predicate>,
    },
    Any {
        of: Vec<Predicate>,
    },
    Not {
        of: Box<Predicate>,
    },
    FileExists {
        path: String,
    },
    FileReadable {
        path: String,
    },
    FileContains {
        path: String,
        text: String,
    },
    /// Package not corrupted, its files present and readable, dependencies healthy.
    PkgHealthy {
        name: String,
    },
    EnvEquals {
        var: String,
        value: String,
    },
    EnvSet {
        var: String,
    },
    PathHas {
        dir: String,
    },
    /// True when `of` holds; otherwise alternates with the build count of the state.
    Flaky {
        of: Box<Predicate>,
    },
}

impl Predicate {
    pub fn pkg(name: &str) -> Self {
        Predicate::PkgHealthy { name: name.into() }
    }

    pub fn readable(path: &str) -> Self {
        Predicate::FileReadable { path: path.into() }
    }

    pub fn contains(path: &str, text: &str) -> Self {
        Predicate::FileContains { path: path.into(), text: text.into() }
    }

    pub fn env(var: &str, value: &str) -> Self {
        Predicate::EnvEquals { var: var.into(), value: value.into() }
    }

    pub fn path_has(dir: &str) -> Self {
        Predicate::PathHas { dir: dir.into() }
    }

    pub fn all(of: Vec<Predicate>) -> Self {
        Predicate::All { of }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimFile {
    pub content: String,
    #[serde(default = "yes")]
    pub readable: bool,
}

impl SimFile {
    pub fn new(content: impl Into<String>) -> Self {
        Self { content: content.into(), readable: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimPackage {
    #[serde(default)]
    pub deps: Vec<String>,
    #[serde(default)]
    pub files: Vec<String>,
    #[serde(default)]
    pub corrupted: bool,
}

fn failed_outcome() -> TestOutcome {
    TestOutcome::Failed
}

fn always() -> Predicate {
    Predicate::Always
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimTest {
    pub id: TestId,
    pub requires: Predicate,
    /// Reported outcome when `requires` is false.
    #[serde(default = "failed_outcome")]
    pub fail_as: TestOutcome,
}

/// A desk-scale stand-in for a real repository environment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimScenario {
    pub repo: String,
    pub base: BaseImageRef,
    pub codebase_ref: String,
    #[serde(default)]
    pub files: BTreeMap<String, SimFile>,
    #[serde(default)]
    pub packages: BTreeMap<String, SimPackage>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub path: Vec<String>,
    /// Whether the test runner itself can start.
    #[serde(default = "always")]
    pub runner: Predicate,
    pub tests: Vec<SimTest>,
}

impl SimScenario {
    pub fn parse(json: &str) -> Result<Self, SandboxError> {
        serde_json::from_str(json).map_err(|e| SandboxError::Io(format!("scenario: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, SandboxError> {
        let text = std::fs::read_to_string(path).map_err(|e| SandboxError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn gold_state(&self) -> EnvironmentState {
        EnvironmentState::new(self.base.clone(), self.codebase_ref.clone()).expect("scenario codebase ref")
    }

    /// The gold instance this scenario describes, unverified.
    pub fn gold_instance(&self) -> GoldInstance {
        GoldInstance {
            state: self.gold_state(),
            repo_name: self.repo.clone(),
            test_inventory: self.tests.iter().map(|t| t.id.clone()).collect(),
            image_tag: self.base.to_string(),
        }
    }

    /// Tests whose predicates fail in the untouched scenario; empty for a valid gold.
    pub fn failing_in_gold(&self) -> Vec<TestId> {
        let world = World::pristine(Arc::new(self.clone()), 0);
        self.tests.iter().filter(|t| !world.eval(&t.requires)).map(|t| t.id.clone()).collect()
    }

    /// Outcome of every scenario test after applying `state` from scratch,
    /// with the given build count. Used as an oracle in tests.
    pub fn evaluate(
        &self,
        state: &EnvironmentState,
        build_ordinal: u64,
    ) -> Result<Vec<(TestId, TestOutcome)>, SandboxError> {
        let world = World::build(Arc::new(self.clone()), state, build_ordinal)?;
        Ok(self
            .tests
            .iter()
            .map(|t| (t.id.clone(), if world.eval(&t.requires) { TestOutcome::Passed } else { t.fail_as }))
            .collect())
    }

    /// Whether the test runner itself still starts in `state`.
    pub fn runner_starts(&self, state: &EnvironmentState, build_ordinal: u64) -> Result<bool, SandboxError> {
        let world = World::build(Arc::new(self.clone()), state, build_ordinal)?;
        Ok(world.eval(&self.runner))
    }
}

#[derive(Debug, Clone)]
struct World {
    pristine: Arc<SimScenario>,
    files: BTreeMap<String, SimFile>,
    packages: BTreeMap<String, SimPackage>,
    env: BTreeMap<String, String>,
    path: Vec<String>,
    build_ordinal: u64,
}

fn normalize(cwd: &str, p: &str) -> String {
    let joined = if p.starts_with('/') { p.to_string() } else { format!("{cwd}/{p}") };
    let mut parts: Vec<&str> = Vec::new();
    for c in joined.split('/') {
        match c {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            c => parts.push(c),
        }
    }
    format!("/{}", parts.join("/"))
}

fn under(path: &str, dir: &str) -> bool {
    path == dir || (dir == "/" && path.starts_with('/')) || path.strip_prefix(dir).is_some_and(|r| r.starts_with('/'))
}

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
    cost: f64,
}

impl Outcome {
    fn ok(stdout: impl Into<String>) -> Self {
        Self { code: 0, stdout: stdout.into(), stderr: String::new(), cost: 1.0 }
    }

    fn fail(code: i32, stderr: impl Into<String>) -> Self {
        Self { code, stdout: String::new(), stderr: stderr.into(), cost: 1.0 }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Connector {
    Start,
    And,
    Or,
    Then,
}

/// Splits a shell line into commands joined by `&&`, `||` or `;`.
fn split_commands(text: &str) -> Option<Vec<(Connector, Vec<String>)>> {
    let text = text.replace("\\\n", " ");
    let words = shlex::split(&text)?;
    let mut out = Vec::new();
    let mut current = Vec::new();
    let mut next = Connector::Start;
    let mut flush = |current: &mut Vec<String>, next: &mut Connector, conn: Connector| {
        if !current.is_empty() {
            out.push((*next, std::mem::take(current)));
        }
        *next = conn;
    };
    for w in words {
        match w.as_str() {
            "&&" => flush(&mut current, &mut next, Connector::And),
            "||" => flush(&mut current, &mut next, Connector::Or),
            ";" => flush(&mut current, &mut next, Connector::Then),
            _ if w.ends_with(';') && w.len() > 1 => {
                current.push(w.trim_end_matches(';').to_string());
                flush(&mut current, &mut next, Connector::Then);
            }
            _ => current.push(w),
        }
    }
    flush(&mut current, &mut next, Connector::Then);
    Some(out)
}

struct Shell<'a> {
    world: &'a mut World,
    mounts: &'a [MountSpec],
    cwd: String,
}

impl World {
    fn pristine(scenario: Arc<SimScenario>, build_ordinal: u64) -> Self {
        Self {
            files: scenario.files.clone(),
            packages: scenario.packages.clone(),
            env: scenario.env.clone(),
            path: scenario.path.clone(),
            pristine: scenario,
            build_ordinal,
        }
    }

    /// Code patches first, then the build directives in order.
    fn build(scenario: Arc<SimScenario>, state: &EnvironmentState, build_ordinal: u64) -> Result<Self, SandboxError> {
        let mut world = Self::pristine(scenario, build_ordinal);
        for patch in state.flattened_patches() {
            world.files.insert(format!("{CODEBASE_ROOT}/{}", patch.path), SimFile::new(patch.content.clone()));
        }
        for line in state.flattened_lines() {
            world.apply_directive(line)?;
        }
        Ok(world)
    }

    fn apply_directive(&mut self, line: &str) -> Result<(), SandboxError> {
        let keyword = instruction(line);
        let rest = line.trim_start()[keyword.len()..].trim().replace("\\\n", " ");
        match keyword.as_str() {
            "RUN" => {
                let script = match serde_json::from_str::<Vec<String>>(&rest) {
                    Ok(argv) => argv
                        .iter()
                        .map(|a| shlex::try_quote(a).map(|q| q.into_owned()).unwrap_or_default())
                        .collect::<Vec<_>>()
                        .join(" "),
                    Err(_) => rest,
                };
                let mut shell = Shell { world: self, mounts: &[], cwd: CODEBASE_ROOT.to_string() };
                let result = shell.run_strict(&script, line)?;
                if result.exit_code != 0 {
                    return Err(SandboxError::BuildFailed(format!(
                        "{line}\nexit code {}\n{}{}",
                        result.exit_code, result.stdout, result.stderr
                    )));
                }
                Ok(())
            }
            "ENV" => {
                let words = shlex::split(&rest).ok_or_else(|| SandboxError::UnknownSimOp(line.to_string()))?;
                if words.iter().all(|w| w.contains('=')) {
                    for w in words {
                        let (k, v) = w.split_once('=').expect("checked");
                        self.env.insert(k.to_string(), v.to_string());
                    }
                } else if let [k, v @ ..] = words.as_slice() {
                    self.env.insert(k.clone(), v.join(" "));
                } else {
                    return Err(SandboxError::UnknownSimOp(line.to_string()));
                }
                Ok(())
            }
            "WORKDIR" | "LABEL" | "USER" => Ok(()),
            _ => Err(SandboxError::UnknownSimOp(line.to_string())),
        }
    }

    fn file(&self, path: &str) -> Option<&SimFile> {
        self.files.get(path)
    }

    fn eval(&self, p: &Predicate) -> bool {
        match p {
            Predicate::Always => true,
            Predicate::All { of } => of.iter().all(|q| self.eval(q)),
            Predicate::Any { of } => of.iter().any(|q| self.eval(q)),
            Predicate::Not { of } => !self.eval(of),
            Predicate::FileExists { path } => self.file(path).is_some(),
            Predicate::FileReadable { path } => self.file(path).is_some_and(|f| f.readable),
            Predicate::FileContains { path, text } => {
                self.file(path).is_some_and(|f| f.readable && f.content.contains(text.as_str()))
            }
            Predicate::PkgHealthy { name } => self.pkg_healthy(name, &mut BTreeSet::new()),
            Predicate::EnvEquals { var, value } => self.env.get(var) == Some(value),
            Predicate::EnvSet { var } => self.env.contains_key(var),
            Predicate::PathHas { dir } => self.path.contains(dir),
            Predicate::Flaky { of } => self.eval(of) || self.build_ordinal % 2 == 1,
        }
    }

    fn pkg_healthy(&self, name: &str, visiting: &mut BTreeSet<String>) -> bool {
        if !visiting.insert(name.to_string()) {
            return true;
        }
        let Some(pkg) = self.packages.get(name) else { return false };
        !pkg.corrupted
            && pkg.files.iter().all(|f| self.file(f).is_some_and(|f| f.readable))
            && pkg.deps.iter().all(|d| self.pkg_healthy(d, visiting))
    }

    fn run_tests(&self, selected: &[TestId]) -> String {
        if !self.eval(&self.pristine.runner) {
            return "bash: line 1: pytest: command not found\n".to_string();
        }
        let chosen: Vec<&SimTest> =
            self.pristine.tests.iter().filter(|t| selected.iter().any(|s| s.covers(&t.id))).collect();
        let n = chosen.len();
        let mut log =
            String::from("============================= test session starts ==============================\n");
        log.push_str(&format!("collecting ... collected {n} items\n\n"));
        let (mut passed, mut failed, mut errors) = (0, 0, 0);
        for (i, t) in chosen.iter().enumerate() {
            let outcome = if self.eval(&t.requires) { TestOutcome::Passed } else { t.fail_as };
            match outcome {
                TestOutcome::Passed => passed += 1,
                TestOutcome::Errored => errors += 1,
                TestOutcome::Failed => failed += 1,
                TestOutcome::Skipped => {}
            }
            let head = format!("{} {}", t.id, outcome.marker());
            log.push_str(&format!("{head:<73} [{:>3}%]\n", (i + 1) * 100 / n));
        }
        let mut parts = Vec::new();
        if failed > 0 {
            parts.push(format!("{failed} failed"));
        }
        if passed > 0 {
            parts.push(format!("{passed} passed"));
        }
        let skipped = n - passed - failed - errors;
        if skipped > 0 {
            parts.push(format!("{skipped} skipped"));
        }
        if errors > 0 {
            parts.push(format!("{errors} error{}", if errors == 1 { "" } else { "s" }));
        }
        let summary = if parts.is_empty() { "no tests ran".to_string() } else { parts.join(", ") };
        log.push_str(&format!("{:=^80}\n", format!(" {summary} in {:.2}s ", n as f64 * 0.01)));
        log
    }
}

impl Shell<'_> {
    /// Build-time execution: any verb outside the vocabulary is a hard error.
    fn run_strict(&mut self, script: &str, line: &str) -> Result<ExecResult, SandboxError> {
        let commands = split_commands(script).ok_or_else(|| SandboxError::UnknownSimOp(line.to_string()))?;
        if commands.is_empty() {
            return Err(SandboxError::UnknownSimOp(line.to_string()));
        }
        if let Some((_, argv)) = commands.iter().find(|(_, argv)| !SIM_VERBS.contains(&argv[0].as_str())) {
            return Err(SandboxError::UnknownSimOp(format!("{} (in {line})", argv[0])));
        }
        Ok(self.run(commands, f64::INFINITY))
    }

    fn run_lenient(&mut self, script: &str, timeout: f64) -> ExecResult {
        match split_commands(script) {
            Some(commands) => self.run(commands, timeout),
            None => ExecResult {
                exit_code: 2,
                stdout: String::new(),
                stderr: "syntax error: unterminated quote\n".into(),
                duration: 1.0,
                timed_out: false,
            },
        }
    }

    fn run(&mut self, commands: Vec<(Connector, Vec<String>)>, timeout: f64) -> ExecResult {
        let mut result =
            ExecResult { exit_code: 0, stdout: String::new(), stderr: String::new(), duration: 0.0, timed_out: false };
        for (conn, argv) in commands {
            let skip = match conn {
                Connector::And => result.exit_code != 0,
                Connector::Or => result.exit_code == 0,
                Connector::Start | Connector::Then => false,
            };
            if skip {
                continue;
            }
            let (argv, redirect) = split_redirect(argv);
            let cost = if argv.first().map(String::as_str) == Some("sleep") {
                argv.get(1).and_then(|s| s.parse::<f64>().ok()).unwrap_or(1.0).max(1.0)
            } else {
                1.0
            };
            if result.duration + cost > timeout {
                result.duration = timeout;
                result.timed_out = true;
                result.exit_code = KILLED_EXIT_CODE;
                return result;
            }
            let mut out = self.command(&argv);
            out.cost = cost;
            if let Some((path, append)) = redirect {
                let text = std::mem::take(&mut out.stdout);
                if let Err(e) = self.write(&path, &text, append) {
                    out = Outcome::fail(1, e);
                }
            }
            result.duration += out.cost;
            result.exit_code = out.code;
            result.stdout.push_str(&out.stdout);
            result.stderr.push_str(&out.stderr);
            if argv.first().map(String::as_str) == Some("exit") {
                break;
            }
        }
        result
    }

    fn resolve(&self, p: &str) -> String {
        normalize(&self.cwd, p)
    }

    fn write(&mut self, path: &str, text: &str, append: bool) -> Result<(), String> {
        let path = self.resolve(path);
        if let Some(host) = host_path_for(self.mounts, &path) {
            if let Some(parent) = host.parent() {
                std::fs::create_dir_all(parent).map_err(|e| e.to_string())?;
            }
            let mut content = if append { std::fs::read_to_string(&host).unwrap_or_default() } else { String::new() };
            content.push_str(text);
            return std::fs::write(&host, content).map_err(|e| e.to_string());
        }
        let entry = self.world.files.entry(path).or_insert_with(|| SimFile::new(""));
        if append {
            entry.content.push_str(text);
        } else {
            entry.content = text.to_string();
        }
        Ok(())
    }

    fn read(&self, path: &str) -> Result<String, String> {
        let path = self.resolve(path);
        if let Some(host) = host_path_for(self.mounts, &path) {
            return std::fs::read_to_string(&host).map_err(|_| format!("{path}: No such file or directory"));
        }
        match self.world.files.get(&path) {
            Some(f) if f.readable => Ok(f.content.clone()),
            Some(_) => Err(format!("{path}: Permission denied")),
            None => Err(format!("{path}: No such file or directory")),
        }
    }

    fn matching(&self, path: &str) -> Vec<String> {
        self.world.files.keys().filter(|k| under(k, path)).cloned().collect()
    }

    fn command(&mut self, argv: &[String]) -> Outcome {
        let Some((verb, args)) = argv.split_first() else { return Outcome::ok("") };
        let arg = |i: usize| args.get(i).map(String::as_str);
        match verb.as_str() {
            "true" | "mkdir" => Outcome::ok(""),
            "false" => Outcome::fail(1, ""),
            "echo" => Outcome::ok(format!("{}\n", args.join(" "))),
            "exit" => {
                let code = arg(0).and_then(|s| s.parse().ok()).unwrap_or(0);
                Outcome { code, stdout: String::new(), stderr: String::new(), cost: 1.0 }
            }
            "sleep" => Outcome::ok(""),
            "cd" => {
                self.cwd = self.resolve(arg(0).unwrap_or("/"));
                Outcome::ok("")
            }
            "cat" => {
                let mut out = String::new();
                for p in args {
                    match self.read(p) {
                        Ok(text) => out.push_str(&text),
                        Err(e) => return Outcome { code: 1, stdout: out, stderr: format!("cat: {e}\n"), cost: 1.0 },
                    }
                }
                Outcome::ok(out)
            }
            "ls" => {
                let dir = self.resolve(arg(0).unwrap_or("."));
                let prefix = if dir == "/" { "/".to_string() } else { format!("{dir}/") };
                let entries: BTreeSet<&str> = self
                    .world
                    .files
                    .keys()
                    .filter_map(|k| k.strip_prefix(&prefix))
                    .map(|rest| rest.split('/').next().unwrap_or(rest))
                    .collect();
                if entries.is_empty() && !self.world.files.contains_key(&dir) {
                    return Outcome::fail(2, format!("ls: cannot access '{dir}': No such file or directory\n"));
                }
                Outcome::ok(entries.into_iter().map(|e| format!("{e}\n")).collect::<String>())
            }
            "rm" => {
                let force = args.iter().any(|a| a.starts_with('-') && a.contains('f'));
                let mut code = 0;
                let mut stderr = String::new();
                for p in args.iter().filter(|a| !a.starts_with('-')) {
                    let path = self.resolve(p);
                    let hits = self.matching(&path);
                    if hits.is_empty() && !force {
                        code = 1;
                        stderr.push_str(&format!("rm: cannot remove '{path}': No such file or directory\n"));
                    }
                    for h in hits {
                        self.world.files.remove(&h);
                    }
                }
                Outcome { code, stdout: String::new(), stderr, cost: 1.0 }
            }
            "cp" | "mv" => {
                let paths: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
                let [src, dst] = paths.as_slice() else {
                    return Outcome::fail(1, format!("{verb}: expected SRC DST\n"));
                };
                let src = self.resolve(src);
                match self.world.files.get(&src).cloned() {
                    Some(f) if f.readable => {
                        let dst = self.resolve(dst);
                        if verb == "mv" {
                            self.world.files.remove(&src);
                        }
                        self.world.files.insert(dst, f);
                        Outcome::ok("")
                    }
                    Some(_) => Outcome::fail(1, format!("{verb}: {src}: Permission denied\n")),
                    None => Outcome::fail(1, format!("{verb}: {src}: No such file or directory\n")),
                }
            }
            "corrupt_lib" | "restore_lib" => {
                let Some(name) = arg(0) else { return Outcome::fail(2, format!("{verb}: missing package\n")) };
                if !self.world.packages.contains_key(name) {
                    return Outcome::fail(1, format!("{verb}: unknown package {name}\n"));
                }
                if verb == "corrupt_lib" {
                    self.world.packages.get_mut(name).expect("checked").corrupted = true;
                } else {
                    let original = self.world.pristine.packages[name].clone();
                    for f in &original.files {
                        if let Some(file) = self.world.pristine.files.get(f) {
                            self.world.files.insert(f.clone(), file.clone());
                        }
                    }
                    self.world.packages.insert(name.to_string(), original);
                }
                Outcome::ok("")
            }
            "chmod_deny" | "chmod_allow" => {
                let Some(p) = arg(0) else { return Outcome::fail(2, format!("{verb}: missing path\n")) };
                let hits = self.matching(&self.resolve(p));
                if hits.is_empty() {
                    return Outcome::fail(1, format!("{verb}: {p}: No such file or directory\n"));
                }
                for h in hits {
                    self.world.files.get_mut(&h).expect("listed").readable = verb == "chmod_allow";
                }
                Outcome::ok("")
            }
            "env_unset" | "unset" => {
                for v in args {
                    self.world.env.remove(v);
                }
                Outcome::ok("")
            }
            "env_set" | "export" => {
                for a in args {
                    match a.split_once('=') {
                        Some((k, v)) => {
                            self.world.env.insert(k.to_string(), v.to_string());
                        }
                        None => return Outcome::fail(2, format!("{verb}: expected VAR=value, got {a}\n")),
                    }
                }
                Outcome::ok("")
            }
            "patch_file" => {
                let (Some(p), Some(old), Some(new)) = (arg(0), arg(1), arg(2)) else {
                    return Outcome::fail(2, "patch_file: expected PATH OLD NEW\n");
                };
                let path = self.resolve(p);
                match self.world.files.get_mut(&path) {
                    Some(f) if f.content.contains(old) => {
                        f.content = f.content.replacen(old, new, 1);
                        Outcome::ok("")
                    }
                    Some(_) => Outcome::fail(1, format!("patch_file: {old:?} not found in {path}\n")),
                    None => Outcome::fail(1, format!("patch_file: {path}: No such file or directory\n")),
                }
            }
            "write_file" => {
                let Some(p) = arg(0) else { return Outcome::fail(2, "write_file: missing path\n") };
                let content = args[1..].join(" ");
                match self.write(p, &content, false) {
                    Ok(()) => Outcome::ok(""),
                    Err(e) => Outcome::fail(1, e),
                }
            }
            "break_path" => {
                let Some(dir) = arg(0) else { return Outcome::fail(2, "break_path: missing dir\n") };
                self.world.path.retain(|d| d != dir);
                Outcome::ok("")
            }
            "add_path" => {
                let Some(dir) = arg(0) else { return Outcome::fail(2, "add_path: missing dir\n") };
                if !self.world.path.iter().any(|d| d == dir) {
                    self.world.path.push(dir.to_string());
                }
                Outcome::ok("")
            }
            "pytest" => {
                let selected: Vec<TestId> =
                    args.iter().filter(|a| !a.starts_with('-')).filter_map(|a| a.parse().ok()).collect();
                let selected = if selected.is_empty() {
                    self.world.pristine.tests.iter().map(|t| t.id.clone()).collect()
                } else {
                    selected
                };
                let log = self.world.run_tests(&selected);
                let report = parse_verbose_log(&log);
                let code = if report.runner_status == crate::testrun::RunnerStatus::CommandFailed {
                    127
                } else if report.records.iter().all(|r| !r.outcome.is_failure()) {
                    0
                } else {
                    1
                };
                Outcome { code, stdout: log, stderr: String::new(), cost: 1.0 }
            }
            other => Outcome::fail(127, format!("bash: {other}: command not found\n")),
        }
    }
}

fn split_redirect(argv: Vec<String>) -> (Vec<String>, Option<(String, bool)>) {
    let mut out = Vec::new();
    let mut redirect = None;
    let mut iter = argv.into_iter();
    while let Some(w) = iter.next() {
        match w.as_str() {
            ">" | ">>" => {
                if let Some(target) = iter.next() {
                    if target != "/dev/null" {
                        redirect = Some((target, w == ">>"));
                    }
                }
            }
            "2>&1" | "2>/dev/null" | ">/dev/null" | "&>/dev/null" => {}
            _ => out.push(w),
        }
    }
    (out, redirect)
}

struct SimSession {
    world: World,
    mounts: Vec<MountSpec>,
}

/// In-process backend interpreting build directives as scripted mutations of
/// a [`SimScenario`]. Pure in (scenario, deltas, commands), except that
/// `Flaky` predicates see how often the same state has been built.
#[derive(Default)]
pub struct SimBackend {
    scenarios: HashMap<String, Arc<SimScenario>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<SimSession>>>>,
    builds: Mutex<HashMap<String, u64>>,
    next_session: AtomicU64,
}

impl std::fmt::Debug for SimBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimBackend")
            .field("scenarios", &self.scenarios.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl SimBackend {
    pub fn new(scenarios: impl IntoIterator<Item = SimScenario>) -> Self {
        let scenarios = scenarios.into_iter().map(|s| (s.base.to_string(), Arc::new(s))).collect();
        Self { scenarios, ..Default::default() }
    }

    pub fn scenario(&self, base: &BaseImageRef) -> Option<&SimScenario> {
        self.scenarios.get(&base.to_string()).map(|s| s.as_ref())
    }

    /// How many times a state with this fingerprint was built.
    pub fn build_count(&self, fingerprint: &str) -> u64 {
        self.builds.lock().expect("build counter").get(fingerprint).copied().unwrap_or(0)
    }

    fn session(&self, handle: &SandboxHandle) -> Result<Arc<Mutex<SimSession>>, SandboxError> {
        self.sessions
            .lock()
            .expect("session table")
            .get(&handle.session_id)
            .cloned()
            .ok_or_else(|| SandboxError::SessionDead(handle.session_id.clone()))
    }
}

impl SandboxBackend for SimBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Simulated
    }

    fn build_state(&self, state: &EnvironmentState, options: &BuildOptions) -> Result<SandboxHandle, SandboxError> {
        check_mounts(&options.mounts)?;
        let scenario = self
            .scenarios
            .get(&state.base().to_string())
            .cloned()
            .ok_or_else(|| SandboxError::UnknownScenario(state.base().to_string()))?;
        let fingerprint = state.fingerprint();
        let ordinal = {
            let mut builds = self.builds.lock().expect("build counter");
            let n = builds.entry(fingerprint.clone()).or_insert(0);
            *n += 1;
            *n - 1
        };
        let world = World::build(scenario, state, ordinal)?;
        let id = format!("sim-{:06}", self.next_session.fetch_add(1, Ordering::Relaxed));
        let session = SimSession { world, mounts: options.mounts.clone() };
        self.sessions.lock().expect("session table").insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(SandboxHandle {
            backend: BackendKind::Simulated,
            state_fingerprint: fingerprint,
            session_id: id,
            mounts: options.mounts.clone(),
        })
    }

    fn exec_command(
        &self,
        handle: &SandboxHandle,
        command: &str,
        timeout: Duration,
    ) -> Result<ExecResult, SandboxError> {
        let session = self.session(handle)?;
        let mut s = session.lock().expect("session");
        let SimSession { world, mounts } = &mut *s;
        let mut shell = Shell { world, mounts, cwd: CODEBASE_ROOT.to_string() };
        Ok(shell.run_lenient(command, timeout.as_secs_f64()))
    }

    fn write_file(&self, handle: &SandboxHandle, guest_path: &str, content: &str) -> Result<(), SandboxError> {
        let session = self.session(handle)?;
        let mut s = session.lock().expect("session");
        let SimSession { world, mounts } = &mut *s;
        let mut shell = Shell { world, mounts, cwd: "/".into() };
        shell.write(guest_path, content, false).map_err(SandboxError::Io)
    }

    fn read_file(&self, handle: &SandboxHandle, guest_path: &str) -> Result<Option<String>, SandboxError> {
        let session = self.session(handle)?;
        let mut s = session.lock().expect("session");
        let SimSession { world, mounts } = &mut *s;
        let shell = Shell { world, mounts, cwd: "/".into() };
        Ok(shell.read(guest_path).ok())
    }

    fn run_test_script(&self, handle: &SandboxHandle, selected: &[TestId]) -> Result<TestRunReport, SandboxError> {
        let session = self.session(handle)?;
        let log = session.lock().expect("session").world.run_tests(selected);
        let mut report = parse_verbose_log(&log);
        keep_log(handle, &log, &mut report);
        Ok(report)
    }

    fn teardown(&self, handle: &SandboxHandle) {
        self.sessions.lock().expect("session table").remove(&handle.session_id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::EnvDelta;
    use crate::testrun::{classify_outcomes, RunnerStatus};

    fn scenario() -> SimScenario {
        let mut files = BTreeMap::new();
        files.insert("/usr/lib/libz.so.1".to_string(), SimFile::new("\x7fELF zlib"));
        files.insert("/testbed/pkg/io.py".to_string(), SimFile::new("import zlib\n"));
        files.insert("/testbed/.git/HEAD".to_string(), SimFile::new("ref: main"));
        let mut packages = BTreeMap::new();
        packages.insert("zlib".into(), SimPackage { files: vec!["/usr/lib/libz.so.1".into()], ..Default::default() });
        packages.insert("pandas".into(), SimPackage { deps: vec!["zlib".into()], ..Default::default() });
        SimScenario {
            repo: "demo".into(),
            base: "task-demo:latest".parse().unwrap(),
            codebase_ref: "demo@1".into(),
            files,
            packages,
            env: [("LANG".to_string(), "C.UTF-8".to_string())].into(),
            path: vec!["/opt/miniconda3/envs/testbed/bin".into()],
            runner: Predicate::path_has("/opt/miniconda3/envs/testbed/bin"),
            tests: vec![
                SimTest {
                    id: "tests/test_io.py::test_gzip".parse().unwrap(),
                    requires: Predicate::pkg("zlib"),
                    fail_as: TestOutcome::Failed,
                },
                SimTest {
                    id: "tests/test_io.py::test_frame".parse().unwrap(),
                    requires: Predicate::pkg("pandas"),
                    fail_as: TestOutcome::Errored,
                },
                SimTest {
                    id: "tests/test_str.py::test_locale".parse().unwrap(),
                    requires: Predicate::env("LANG", "C.UTF-8"),
                    fail_as: TestOutcome::Failed,
                },
            ],
        }
    }

    fn poor(lines: &[&str]) -> EnvironmentState {
        let delta = EnvDelta::new(lines.iter().map(|s| s.to_string()).collect(), vec![]).unwrap();
        scenario().gold_state().apply_delta(&delta).unwrap()
    }

    fn all_ids() -> Vec<TestId> {
        scenario().tests.iter().map(|t| t.id.clone()).collect()
    }

    #[test]
    fn gold_passes_everything() {
        let sim = SimBackend::new([scenario()]);
        assert!(scenario().failing_in_gold().is_empty());
        let h = sim.build_state(&scenario().gold_state(), &BuildOptions::default()).unwrap();
        let report = sim.run_test_script(&h, &all_ids()).unwrap();
        assert_eq!(report.runner_status, RunnerStatus::Completed);
        assert!(report.records.iter().all(|r| r.outcome == TestOutcome::Passed));
        assert_eq!(report.records.len(), 3);
    }

    #[test]
    fn corrupt_lib_breaks_dependents_transitively() {
        let sim = SimBackend::new([scenario()]);
        let h = sim.build_state(&poor(&["RUN corrupt_lib zlib"]), &BuildOptions::default()).unwrap();
        let report = sim.run_test_script(&h, &all_ids()).unwrap();
        let c = classify_outcomes(&all_ids(), &report);
        let f2p: Vec<String> = c.fail_to_pass.iter().map(|t| t.to_string()).collect();
        assert_eq!(f2p, vec!["tests/test_io.py::test_frame", "tests/test_io.py::test_gzip"]);
        assert_eq!(report.outcome_of(&"tests/test_io.py::test_frame".parse().unwrap()), Some(TestOutcome::Errored));
    }

    #[test]
    fn report_matches_predicate_oracle() {
        let sim = SimBackend::new([scenario()]);
        let state = poor(&["RUN chmod_deny /usr/lib/libz.so.1 && env_unset LANG"]);
        let h = sim.build_state(&state, &BuildOptions::default()).unwrap();
        let report = sim.run_test_script(&h, &all_ids()).unwrap();
        let oracle = scenario().evaluate(&state, 0).unwrap();
        for (id, outcome) in oracle {
            assert_eq!(report.outcome_of(&id), Some(outcome), "{id}");
        }
    }

    #[test]
    fn unknown_verb_is_hard_error_at_build_only() {
        let sim = SimBackend::new([scenario()]);
        let err = sim.build_state(&poor(&["RUN apt-get install -y foo"]), &BuildOptions::default()).unwrap_err();
        assert!(matches!(err, SandboxError::UnknownSimOp(_)), "{err:?}");
        let err = sim.build_state(&poor(&["COPY a b"]), &BuildOptions::default()).unwrap_err();
        assert!(matches!(err, SandboxError::UnknownSimOp(_)));
        let h = sim.build_state(&scenario().gold_state(), &BuildOptions::default()).unwrap();
        let r = sim.exec_command(&h, "apt-get install foo", Duration::from_secs(5)).unwrap();
        assert_eq!(r.exit_code, 127);
    }

    #[test]
    fn failing_run_line_fails_build() {
        let sim = SimBackend::new([scenario()]);
        let err = sim.build_state(&poor(&["RUN rm /nope"]), &BuildOptions::default()).unwrap_err();
        assert!(matches!(err, SandboxError::BuildFailed(_)));
    }

    #[test]
    fn env_directive_and_multiline_run() {
        let sim = SimBackend::new([scenario()]);
        let state = poor(&["ENV LANG=tr_TR.UTF-8", "RUN true \\\n    && corrupt_lib zlib"]);
        let h = sim.build_state(&state, &BuildOptions::default()).unwrap();
        let report = sim.run_test_script(&h, &all_ids()).unwrap();
        assert_eq!(report.records.iter().filter(|r| r.outcome.is_failure()).count(), 3);
    }

    #[test]
    fn exec_basics_and_timeout() {
        let sim = SimBackend::new([scenario()]);
        let h = sim.build_state(&scenario().gold_state(), &BuildOptions::default()).unwrap();
        let t = Duration::from_secs(30);
        assert_eq!(sim.exec_command(&h, "true", t).unwrap().exit_code, 0);
        let r = sim.exec_command(&h, "sleep 10", Duration::from_secs(1)).unwrap();
        assert!(r.timed_out);
        assert_eq!(r.exit_code, KILLED_EXIT_CODE);
        assert_eq!(sim.exec_command(&h, "cat pkg/io.py", t).unwrap().stdout, "import zlib\n");
        assert_eq!(sim.exec_command(&h, "false || echo recovered", t).unwrap().stdout, "recovered\n");
        assert_eq!(sim.exec_command(&h, "ls /testbed", t).unwrap().stdout, ".git\npkg\n");
    }

    #[test]
    fn rm_flips_dependent_predicates() {
        let sim = SimBackend::new([scenario()]);
        let h = sim.build_state(&scenario().gold_state(), &BuildOptions::default()).unwrap();
        let t = Duration::from_secs(30);
        assert_eq!(sim.exec_command(&h, "rm /usr/lib/libz.so.1", t).unwrap().exit_code, 0);
        let report = sim.run_test_script(&h, &all_ids()).unwrap();
        assert_eq!(report.outcome_of(&all_ids()[0]), Some(TestOutcome::Failed));
        assert_eq!(report.outcome_of(&all_ids()[2]), Some(TestOutcome::Passed));
        sim.exec_command(&h, "restore_lib zlib", t).unwrap();
        let report = sim.run_test_script(&h, &all_ids()).unwrap();
        assert!(report.records.iter().all(|r| r.outcome == TestOutcome::Passed));
    }

    #[test]
    fn missing_runner_is_command_failure() {
        let sim = SimBackend::new([scenario()]);
        let h = sim
            .build_state(&poor(&["RUN break_path /opt/miniconda3/envs/testbed/bin"]), &BuildOptions::default())
            .unwrap();
        let report = sim.run_test_script(&h, &all_ids()).unwrap();
        assert_eq!(report.runner_status, RunnerStatus::CommandFailed);
    }

    #[test]
    fn teardown_kills_session_and_keeps_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let sim = SimBackend::new([scenario()]);
        let h = sim.build_state(&scenario().gold_state(), &BuildOptions::with_logs(dir.path())).unwrap();
        sim.exec_command(&h, "sleep 100", Duration::from_secs(1)).unwrap();
        sim.write_file(&h, "/logs/Dockerfile", "RUN true\n").unwrap();
        sim.run_test_script(&h, &all_ids()).unwrap();
        sim.teardown(&h);
        sim.teardown(&h);
        assert_eq!(
            sim.exec_command(&h, "true", Duration::from_secs(1)),
            Err(SandboxError::SessionDead(h.session_id.clone()))
        );
        assert!(dir.path().join("Dockerfile").exists());
        assert!(dir.path().join("test.log").exists());
    }

    #[test]
    fn flaky_predicate_alternates_across_builds() {
        let mut s = scenario();
        s.tests[0].requires = Predicate::Flaky { of: Box::new(Predicate::pkg("zlib")) };
        let sim = SimBackend::new([s]);
        let state = poor(&["RUN corrupt_lib zlib"]);
        let first = sim.build_state(&state, &BuildOptions::default()).unwrap();
        let second = sim.build_state(&state, &BuildOptions::default()).unwrap();
        let a = sim.run_test_script(&first, &all_ids()).unwrap();
        let b = sim.run_test_script(&second, &all_ids()).unwrap();
        assert_ne!(a.outcome_of(&all_ids()[0]), b.outcome_of(&all_ids()[0]));
        assert_eq!(sim.build_count(&state.fingerprint()), 2);
    }

    #[test]
    fn code_patches_apply_before_directives() {
        let sim = SimBackend::new([scenario()]);
        let delta = EnvDelta::new(
            vec!["RUN patch_file pkg/io.py zlib gzip".into()],
            vec![crate::state::CodePatch { path: "pkg/io.py".into(), content: "import zlib as z\n".into() }],
        )
        .unwrap();
        let state = scenario().gold_state().apply_delta(&delta).unwrap();
        let h = sim.build_state(&state, &BuildOptions::default()).unwrap();
        let out = sim.exec_command(&h, "cat /testbed/pkg/io.py", Duration::from_secs(5)).unwrap();
        assert_eq!(out.stdout, "import gzip as z\n");
    }

    #[test]
    fn scenario_json_roundtrip() {
        let s = scenario();
        let json = serde_json::to_string_pretty(&s).unwrap();
        assert_eq!(SimScenario::parse(&json).unwrap(), s);
    }
}
