//! The on-disk repair task bundle: emission, loading, and validation.

mod lock;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dockerfile::logical_lines;
use crate::prompt::{parse_repair_instruction, render_repair_instruction, GuidanceLevel};
use crate::sandbox::{CODEBASE_ROOT, PATCH_DIR};
use crate::state::{BaseImageRef, CodePatch, EnvDelta, EnvironmentState, StateError, TestId};
use crate::testrun::{render_run_script, RUN_TESTS_TEMPLATE, UTS_PLACEHOLDER};
use crate::util::{sha256_hex, slugify};

pub use lock::DirLock;

pub const DOCKERFILE: &str = "Dockerfile";
pub const TASK_YAML: &str = "task.yaml";
pub const COMPOSE_YAML: &str = "docker-compose.yaml";
pub const RUN_TESTS: &str = "run-tests.sh";
pub const META_JSON: &str = "meta.json";
/// Files every bundle has, in validation order.
pub const BUNDLE_FILES: [&str; 5] = [DOCKERFILE, TASK_YAML, COMPOSE_YAML, RUN_TESTS, META_JSON];

pub const META_SCHEMA: u32 = 1;
const COMPOSE_TEMPLATE: &str = include_str!("../../templates/docker-compose.yaml");

#[derive(Debug, Error)]
pub enum PackageError {
    #[error("i/o failure at {path}: {source}")]
    IoFailure { path: PathBuf, source: std::io::Error },
    #[error("{0} exists with different content")]
    CollisionDifferentContent(PathBuf),
    #[error("bundle is missing {0}")]
    MissingFile(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("run-tests.sh selects {script:?} but metadata lists {meta:?}")]
    TestSetMismatch { script: Vec<String>, meta: Vec<String> },
    #[error("lock on {0} not acquired")]
    LockBusy(PathBuf),
    #[error("instance is incomplete: {0}")]
    Incomplete(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PackageError + '_ {
    move |source| PackageError::IoFailure { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Hash of the generator prompts that produced the task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts_sha256: Option<String>,
}

/// A packaged repair task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub instance_id: String,
    pub repo: String,
    pub task_name: String,
    pub base: BaseImageRef,
    pub codebase_ref: String,
    pub delta: EnvDelta,
    pub problem_statement: String,
    pub hint_present: bool,
    pub guidance_level: GuidanceLevel,
    pub fail_to_pass: BTreeSet<TestId>,
    pub pass_to_pass: BTreeSet<TestId>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl TaskInstance {
    /// `<repo>__<task-name-slug>__<10 hex>`, the hex covering the poor state and statement.
    pub fn make_id(repo: &str, task_name: &str, state: &EnvironmentState, statement: &str) -> String {
        let digest = sha256_hex(format!("{}\n{statement}", state.fingerprint()).as_bytes());
        format!("{}__{}__{}", slugify(repo), slugify(task_name), &digest[..10])
    }

    pub fn gold_state(&self) -> Result<EnvironmentState, StateError> {
        EnvironmentState::new(self.base.clone(), self.codebase_ref.clone())
    }

    pub fn poor_state(&self) -> Result<EnvironmentState, StateError> {
        self.gold_state()?.apply_delta(&self.delta)
    }

    /// F2P ∪ P2P in canonical order, as written to `run-tests.sh`.
    pub fn selected_tests(&self) -> Vec<TestId> {
        self.fail_to_pass.union(&self.pass_to_pass).cloned().collect()
    }

    fn check(&self) -> Result<(), PackageError> {
        if self.fail_to_pass.is_empty() {
            return Err(PackageError::Incomplete("empty fail-to-pass set".into()));
        }
        if let Some(t) = self.fail_to_pass.intersection(&self.pass_to_pass).next() {
            return Err(PackageError::Incomplete(format!("{t} is both fail-to-pass and pass-to-pass")));
        }
        if self.problem_statement.trim().is_empty() {
            return Err(PackageError::Incomplete("empty problem statement".into()));
        }
        // the block scalar in task.yaml cannot carry surrounding whitespace
        if self.problem_statement.trim() != self.problem_statement {
            return Err(PackageError::Incomplete("problem statement has surrounding whitespace".into()));
        }
        if self.instance_id.is_empty() || self.instance_id.contains(['/', '\\']) || self.instance_id.starts_with('.') {
            return Err(PackageError::Incomplete(format!("unusable instance id {:?}", self.instance_id)));
        }
        Ok(())
    }
}

/// Sidecar metadata; the sets the task definition itself does not carry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub schema: u32,
    pub instance_id: String,
    pub repo: String,
    pub task_name: String,
    pub base_image: BaseImageRef,
    pub codebase_ref: String,
    pub fail_to_pass: Vec<TestId>,
    pub pass_to_pass: Vec<TestId>,
    pub hint_present: bool,
    pub guidance_level: GuidanceLevel,
    pub dockerfile_lines: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub code_patch_paths: Vec<String>,
    #[serde(default)]
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskBundle {
    pub root: PathBuf,
    /// Relative file names, sorted.
    pub files: Vec<String>,
    pub meta: BundleMeta,
    /// Hash over every file name and byte in the bundle.
    pub fingerprint: String,
}

fn patch_file_name(i: usize) -> String {
    format!("{PATCH_DIR}/{i}")
}

/// `FROM <gold tag>`, a blank line, patch copies, then the delta verbatim.
pub fn render_dockerfile(base: &BaseImageRef, delta: &EnvDelta) -> String {
    let mut out = format!("FROM {base}\n\n");
    for (i, p) in delta.code_patches().iter().enumerate() {
        out.push_str(&format!("COPY {} {CODEBASE_ROOT}/{}\n", patch_file_name(i), p.path));
    }
    out.push_str(&delta.dockerfile_text());
    out
}

pub fn render_compose(instance_id: &str) -> String {
    COMPOSE_TEMPLATE.replace("{image_name}", &instance_id.to_ascii_lowercase())
}

fn meta_of(instance: &TaskInstance) -> BundleMeta {
    BundleMeta {
        schema: META_SCHEMA,
        instance_id: instance.instance_id.clone(),
        repo: instance.repo.clone(),
        task_name: instance.task_name.clone(),
        base_image: instance.base.clone(),
        codebase_ref: instance.codebase_ref.clone(),
        fail_to_pass: instance.fail_to_pass.iter().cloned().collect(),
        pass_to_pass: instance.pass_to_pass.iter().cloned().collect(),
        hint_present: instance.hint_present,
        guidance_level: instance.guidance_level,
        dockerfile_lines: instance.delta.dockerfile_lines().to_vec(),
        code_patch_paths: instance.delta.code_patches().iter().map(|p| p.path.clone()).collect(),
        provenance: instance.provenance.clone(),
    }
}

/// Every file of the bundle, keyed by relative path.
pub fn render_bundle(instance: &TaskInstance) -> Result<BTreeMap<String, String>, PackageError> {
    instance.check()?;
    let script = render_run_script(&instance.selected_tests()).map_err(|e| PackageError::Incomplete(e.to_string()))?;
    let mut meta = serde_json::to_string_pretty(&meta_of(instance)).expect("meta serializes");
    meta.push('\n');
    let mut files = BTreeMap::new();
    files.insert(DOCKERFILE.to_string(), render_dockerfile(&instance.base, &instance.delta));
    files.insert(TASK_YAML.to_string(), render_repair_instruction(&instance.problem_statement));
    files.insert(COMPOSE_YAML.to_string(), render_compose(&instance.instance_id));
    files.insert(RUN_TESTS.to_string(), script);
    files.insert(META_JSON.to_string(), meta);
    for (i, p) in instance.delta.code_patches().iter().enumerate() {
        files.insert(patch_file_name(i), p.content.clone());
    }
    Ok(files)
}

fn fingerprint_files<'a>(files: impl Iterator<Item = (&'a String, &'a [u8])>) -> String {
    let mut buf = Vec::new();
    for (name, bytes) in files {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        buf.extend_from_slice(bytes);
    }
    sha256_hex(&buf)
}

fn list_files(root: &Path) -> Result<Vec<String>, PackageError> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("under root");
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Writes the bundle to `out_dir/<instance id>`. Re-emitting an unchanged
/// instance is a no-op; an existing directory with other bytes is an error.
pub fn emit_bundle(instance: &TaskInstance, out_dir: &Path) -> Result<TaskBundle, PackageError> {
    let files = render_bundle(instance)?;
    let root = out_dir.join(&instance.instance_id);
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let _lock = DirLock::acquire(&root)?;
    let fingerprint = fingerprint_files(files.iter().map(|(k, v)| (k, v.as_bytes())));
    let bundle =
        TaskBundle { root: root.clone(), files: files.keys().cloned().collect(), meta: meta_of(instance), fingerprint };

    if root.exists() {
        let existing = list_files(&root)?;
        let same_names = existing == bundle.files;
        let same_bytes = same_names
            && files.iter().all(|(name, text)| std::fs::read(root.join(name)).is_ok_and(|b| b == text.as_bytes()));
        if same_bytes {
            tracing::debug!(bundle = %root.display(), "bundle unchanged");
            return Ok(bundle);
        }
        return Err(PackageError::CollisionDifferentContent(root));
    }

    let staging = out_dir.join(format!(".{}.partial", instance.instance_id));
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    }
    for (name, text) in &files {
        let path = staging.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        std::fs::write(&path, text).map_err(io_err(&path))?;
    }
    std::fs::rename(&staging, &root).map_err(io_err(&root))?;
    Ok(bundle)
}

fn read_required(root: &Path, name: &str) -> Result<String, PackageError> {
    let path = root.join(name);
    if !path.is_file() {
        return Err(PackageError::MissingFile(name.to_string()));
    }
    std::fs::read_to_string(&path).map_err(io_err(&path))
}

fn schema(msg: impl Into<String>) -> PackageError {
    PackageError::SchemaViolation(msg.into())
}

/// Test ids named by a rendered `run-tests.sh`.
pub fn script_tests(script: &str) -> Result<Vec<String>, PackageError> {
    let at = RUN_TESTS_TEMPLATE.find(UTS_PLACEHOLDER).expect("template has placeholder");
    let (prefix, suffix) = (&RUN_TESTS_TEMPLATE[..at], &RUN_TESTS_TEMPLATE[at + UTS_PLACEHOLDER.len()..]);
    let middle = script
        .strip_prefix(prefix)
        .and_then(|rest| rest.strip_suffix(suffix))
        .ok_or_else(|| schema("run-tests.sh does not follow the test script template"))?;
    if middle.contains('\n') {
        return Err(schema("run-tests.sh test list spans several lines"));
    }
    Ok(middle.split_whitespace().map(str::to_string).collect())
}

fn parse_dockerfile(text: &str, base: &BaseImageRef, root: &Path) -> Result<EnvDelta, PackageError> {
    let from = format!("FROM {base}\n");
    let rest = text.strip_prefix(&from).ok_or_else(|| schema(format!("Dockerfile must start with {from:?}")))?;
    let mut lines = logical_lines(rest).into_iter().peekable();
    let mut patches = Vec::new();
    loop {
        let expected = format!("COPY {} {CODEBASE_ROOT}/", patch_file_name(patches.len()));
        let Some(path) = lines.peek().and_then(|l| l.strip_prefix(&expected)).map(str::to_string) else { break };
        lines.next();
        let content = read_required(root, &patch_file_name(patches.len()))?;
        patches.push(CodePatch { path, content });
    }
    EnvDelta::new(lines.collect(), patches).map_err(|e| schema(format!("Dockerfile delta: {e}")))
}

/// Reads a bundle back and re-derives every invariant.
pub fn load_and_validate(dir: &Path) -> Result<TaskInstance, PackageError> {
    if !dir.is_dir() {
        return Err(PackageError::MissingFile(dir.display().to_string()));
    }
    let mut texts = BTreeMap::new();
    for name in BUNDLE_FILES {
        texts.insert(name, read_required(dir, name)?);
    }
    let meta: BundleMeta = serde_json::from_str(&texts[META_JSON]).map_err(|e| schema(format!("meta.json: {e}")))?;
    if meta.schema != META_SCHEMA {
        return Err(schema(format!("unsupported meta schema {}", meta.schema)));
    }
    if dir.file_name().and_then(|n| n.to_str()) != Some(meta.instance_id.as_str()) {
        return Err(schema(format!("directory name differs from instance id {}", meta.instance_id)));
    }

    let f2p: BTreeSet<TestId> = meta.fail_to_pass.iter().cloned().collect();
    let p2p: BTreeSet<TestId> = meta.pass_to_pass.iter().cloned().collect();
    if f2p.len() != meta.fail_to_pass.len() || p2p.len() != meta.pass_to_pass.len() {
        return Err(schema("duplicate test ids in metadata"));
    }
    if f2p.is_empty() {
        return Err(schema("empty fail-to-pass set"));
    }
    if let Some(t) = f2p.intersection(&p2p).next() {
        return Err(schema(format!("{t} is both fail-to-pass and pass-to-pass")));
    }

    let mut in_script = script_tests(&texts[RUN_TESTS])?;
    let mut in_meta: Vec<String> = f2p.union(&p2p).map(|t| t.to_string()).collect();
    in_script.sort();
    in_meta.sort();
    if in_script != in_meta {
        return Err(PackageError::TestSetMismatch { script: in_script, meta: in_meta });
    }

    let delta = parse_dockerfile(&texts[DOCKERFILE], &meta.base_image, dir)?;
    let patch_paths: Vec<String> = delta.code_patches().iter().map(|p| p.path.clone()).collect();
    if delta.dockerfile_lines() != meta.dockerfile_lines.as_slice() || patch_paths != meta.code_patch_paths {
        return Err(schema("Dockerfile does not reproduce the recorded delta"));
    }

    let problem_statement =
        parse_repair_instruction(&texts[TASK_YAML]).ok_or_else(|| schema("task.yaml is not an instruction block"))?;
    if problem_statement.trim().is_empty() {
        return Err(schema("task.yaml has an empty instruction"));
    }
    if texts[COMPOSE_YAML] != render_compose(&meta.instance_id) {
        return Err(schema("docker-compose.yaml differs from the standard layout"));
    }

    Ok(TaskInstance {
        instance_id: meta.instance_id,
        repo: meta.repo,
        task_name: meta.task_name,
        base: meta.base_image,
        codebase_ref: meta.codebase_ref,
        delta,
        problem_statement,
        hint_present: meta.hint_present,
        guidance_level: meta.guidance_level,
        fail_to_pass: f2p,
        pass_to_pass: p2p,
        provenance: meta.provenance,
    })
}

/// Bundle directories directly under `root`, sorted by name.
pub fn bundle_dirs(root: &Path) -> Result<Vec<PathBuf>, PackageError> {
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_dir() && !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.')))
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Hash over the bundle directory's files.
pub fn fingerprint_dir(root: &Path) -> Result<String, PackageError> {
    let names = list_files(root)?;
    let mut contents = Vec::new();
    for n in &names {
        let path = root.join(n);
        contents.push(std::fs::read(&path).map_err(io_err(&path))?);
    }
    Ok(fingerprint_files(names.iter().zip(contents.iter().map(Vec::as_slice))))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn instance() -> TaskInstance {
        let base: BaseImageRef = "task-pandas:latest".parse().unwrap();
        let delta =
            EnvDelta::new(vec!["RUN corrupt_lib zlib".into(), "RUN rm -rf /testbed/.git".into()], vec![]).unwrap();
        let state = EnvironmentState::new(base.clone(), "pandas@abc").unwrap().apply_delta(&delta).unwrap();
        let statement = "Importing pandas fails with an ELF error.";
        TaskInstance {
            instance_id: TaskInstance::make_id("pandas", "Zlib ELF corruption", &state, statement),
            repo: "pandas".into(),
            task_name: "Zlib ELF corruption".into(),
            base,
            codebase_ref: "pandas@abc".into(),
            delta,
            problem_statement: statement.into(),
            hint_present: false,
            guidance_level: GuidanceLevel::Balanced,
            fail_to_pass: ["t/a.py::x", "t/a.py::y"].iter().map(|s| s.parse().unwrap()).collect(),
            pass_to_pass: ["t/b.py::z"].iter().map(|s| s.parse().unwrap()).collect(),
            provenance: Provenance { seed: Some(7), prompts_sha256: None },
        }
    }

    #[test]
    fn emit_load_roundtrip_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let x = instance();
        let b1 = emit_bundle(&x, dir.path()).unwrap();
        assert!(x.instance_id.starts_with("pandas__zlib-elf-corruption__"));
        let before = fingerprint_dir(&b1.root).unwrap();
        let b2 = emit_bundle(&x, dir.path()).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(fingerprint_dir(&b1.root).unwrap(), before);
        assert_eq!(before, b1.fingerprint);
        assert_eq!(load_and_validate(&b1.root).unwrap(), x);
    }

    #[test]
    fn collision_with_other_content() {
        let dir = tempfile::tempdir().unwrap();
        let x = instance();
        emit_bundle(&x, dir.path()).unwrap();
        let mut y = x.clone();
        y.problem_statement.push_str(" More.");
        assert!(matches!(emit_bundle(&y, dir.path()), Err(PackageError::CollisionDifferentContent(_))));
    }

    #[test]
    fn run_tests_matches_renderer() {
        let dir = tempfile::tempdir().unwrap();
        let x = instance();
        let b = emit_bundle(&x, dir.path()).unwrap();
        let script = std::fs::read_to_string(b.root.join(RUN_TESTS)).unwrap();
        assert_eq!(script, render_run_script(&x.selected_tests()).unwrap());
        assert_eq!(script_tests(&script).unwrap(), vec!["t/a.py::x", "t/a.py::y", "t/b.py::z"]);
    }

    #[test]
    fn dockerfile_splits_back_into_delta() {
        let x = instance();
        let text = render_dockerfile(&x.base, &x.delta);
        assert_eq!(text, "FROM task-pandas:latest\n\nRUN corrupt_lib zlib\nRUN rm -rf /testbed/.git\n");
    }

    #[test]
    fn code_patches_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut x = instance();
        x.delta = EnvDelta::new(
            vec!["RUN true".into()],
            vec![CodePatch { path: "pkg/core.py".into(), content: "x = 1\n".into() }],
        )
        .unwrap();
        let b = emit_bundle(&x, dir.path()).unwrap();
        assert!(b.files.contains(&"envinvert-patches/0".to_string()));
        assert_eq!(load_and_validate(&b.root).unwrap(), x);
    }

    #[test]
    fn incomplete_instances_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut x = instance();
        x.fail_to_pass.clear();
        assert!(matches!(emit_bundle(&x, dir.path()), Err(PackageError::Incomplete(_))));
        let mut y = instance();
        y.pass_to_pass.insert("t/a.py::x".parse().unwrap());
        assert!(matches!(emit_bundle(&y, dir.path()), Err(PackageError::Incomplete(_))));
    }
}
