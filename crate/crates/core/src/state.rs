//! Environment states, deltas, and their content fingerprints.
//!
//! A state is a base image, an ordered history of deltas, and an opaque
//! codebase reference. Applying a delta appends it as a new layer. The
//! fingerprint hashes the flattened content, so it does not depend on where
//! layer boundaries fall: `(s ⊕ a) ⊕ b` and `s ⊕ (a ∘ b)` share a fingerprint.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dockerfile;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StateError {
    #[error("invalid delta: {0}")]
    InvalidDelta(String),
    #[error("invalid base image reference: {0}")]
    InvalidBase(String),
    #[error("invalid codebase reference: {0:?}")]
    InvalidCodebase(String),
    #[error("invalid test id: {0:?}")]
    InvalidTestId(String),
    #[error("malformed state document at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

fn is_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c.is_control())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BaseImageRef {
    name: String,
    tag: String,
}

impl BaseImageRef {
    pub fn new(name: impl Into<String>, tag: impl Into<String>) -> Result<Self, StateError> {
        let (name, tag) = (name.into(), tag.into());
        if !is_token(&name) || !is_token(&tag) || tag.contains(':') || tag.contains('/') {
            return Err(StateError::InvalidBase(format!("{name}:{tag}")));
        }
        Ok(Self { name, tag })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }
}

impl FromStr for BaseImageRef {
    type Err = StateError;

    /// Parses `name[:tag]`; the tag defaults to `latest`. A colon before the
    /// last `/` belongs to a registry port, not to the tag.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let slash = s.rfind('/').map(|i| i + 1).unwrap_or(0);
        match s[slash..].rfind(':') {
            Some(i) => Self::new(&s[..slash + i], &s[slash + i + 1..]),
            None => Self::new(s, "latest"),
        }
    }
}

impl TryFrom<String> for BaseImageRef {
    type Error = StateError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<BaseImageRef> for String {
    fn from(b: BaseImageRef) -> String {
        b.to_string()
    }
}

impl fmt::Display for BaseImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.name, self.tag)
    }
}

/// A unit test identifier, `path` optionally followed by `::selector`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TestId {
    path: String,
    selector: Option<String>,
}

impl TestId {
    pub fn new(path: impl Into<String>, selector: Option<String>) -> Result<Self, StateError> {
        let path = path.into();
        let ok_part = |s: &str| is_token(s) && !s.contains('\'') && !s.contains('"');
        let valid = ok_part(&path) && !path.contains("::") && selector.as_deref().map_or(true, ok_part);
        if !valid {
            return Err(StateError::InvalidTestId(match &selector {
                Some(sel) => format!("{path}::{sel}"),
                None => path,
            }));
        }
        Ok(Self { path, selector })
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn selector(&self) -> Option<&str> {
        self.selector.as_deref()
    }

    /// True when `other` is this test or a test nested under it
    /// (a function inside a selected file, a parametrization of a selected function).
    pub fn covers(&self, other: &TestId) -> bool {
        if self.path != other.path {
            return false;
        }
        match (&self.selector, &other.selector) {
            (None, _) => true,
            (Some(_), None) => false,
            (Some(mine), Some(theirs)) => {
                theirs == mine
                    || theirs
                        .strip_prefix(mine.as_str())
                        .is_some_and(|rest| rest.starts_with("::") || rest.starts_with('['))
            }
        }
    }
}

impl FromStr for TestId {
    type Err = StateError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once("::") {
            Some((path, sel)) => Self::new(path, Some(sel.to_string())),
            None => Self::new(s, None),
        }
    }
}

impl TryFrom<String> for TestId {
    type Error = StateError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<TestId> for String {
    fn from(t: TestId) -> String {
        t.to_string()
    }
}

impl fmt::Display for TestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.selector {
            Some(sel) => write!(f, "{}::{}", self.path, sel),
            None => f.write_str(&self.path),
        }
    }
}

/// Whole-file replacement of a file under the codebase root.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodePatch {
    pub path: String,
    pub content: String,
}

fn check_patch_path(path: &str) -> Result<(), String> {
    if path.is_empty() || path.contains('\n') || path.contains('\0') {
        return Err(format!("bad patch path {path:?}"));
    }
    if path.starts_with('/') || path.starts_with('\\') {
        return Err(format!("patch path must be relative: {path:?}"));
    }
    if path.split(['/', '\\']).any(|c| c == "..") {
        return Err(format!("patch path escapes the tree: {path:?}"));
    }
    Ok(())
}

#[derive(Deserialize)]
struct RawDelta {
    #[serde(default)]
    dockerfile_lines: Vec<String>,
    #[serde(default)]
    code_patches: Vec<CodePatch>,
}

/// One recorded layer of modifications: build directives plus code patches.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawDelta")]
pub struct EnvDelta {
    dockerfile_lines: Vec<String>,
    code_patches: Vec<CodePatch>,
}

impl TryFrom<RawDelta> for EnvDelta {
    type Error = StateError;
    fn try_from(raw: RawDelta) -> Result<Self, Self::Error> {
        EnvDelta::new(raw.dockerfile_lines, raw.code_patches)
    }
}

impl EnvDelta {
    pub fn new(dockerfile_lines: Vec<String>, code_patches: Vec<CodePatch>) -> Result<Self, StateError> {
        let delta = Self { dockerfile_lines, code_patches };
        delta.validate()?;
        Ok(delta)
    }

    /// Builds a delta from build-file text, normalizing continuations into
    /// logical lines and dropping comments.
    pub fn from_dockerfile_text(text: &str) -> Result<Self, StateError> {
        Self::new(dockerfile::logical_lines(text), Vec::new())
    }

    pub fn validate(&self) -> Result<(), StateError> {
        if self.dockerfile_lines.is_empty() && self.code_patches.is_empty() {
            return Err(StateError::InvalidDelta("empty delta".into()));
        }
        for line in &self.dockerfile_lines {
            dockerfile::check_logical_line(line).map_err(StateError::InvalidDelta)?;
        }
        for patch in &self.code_patches {
            check_patch_path(&patch.path).map_err(StateError::InvalidDelta)?;
        }
        Ok(())
    }

    pub fn dockerfile_lines(&self) -> &[String] {
        &self.dockerfile_lines
    }

    pub fn code_patches(&self) -> &[CodePatch] {
        &self.code_patches
    }

    /// The directives as appendable build-file text, one logical line per line.
    pub fn dockerfile_text(&self) -> String {
        let mut out = String::new();
        for line in &self.dockerfile_lines {
            out.push_str(line);
            out.push('\n');
        }
        out
    }
}

/// Concatenates two deltas, `first` before `second`.
pub fn compose_deltas(first: &EnvDelta, second: &EnvDelta) -> Result<EnvDelta, StateError> {
    first.validate()?;
    second.validate()?;
    let mut lines = first.dockerfile_lines.clone();
    lines.extend(second.dockerfile_lines.iter().cloned());
    let mut patches = first.code_patches.clone();
    patches.extend(second.code_patches.iter().cloned());
    EnvDelta::new(lines, patches)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvironmentState {
    base: BaseImageRef,
    deltas: Vec<EnvDelta>,
    codebase_ref: String,
}

const DOC_HEADER: &str = "envstate 1";

impl EnvironmentState {
    pub fn new(base: BaseImageRef, codebase_ref: impl Into<String>) -> Result<Self, StateError> {
        let codebase_ref = codebase_ref.into();
        if !is_token(&codebase_ref) {
            return Err(StateError::InvalidCodebase(codebase_ref));
        }
        Ok(Self { base, deltas: Vec::new(), codebase_ref })
    }

    pub fn base(&self) -> &BaseImageRef {
        &self.base
    }

    pub fn deltas(&self) -> &[EnvDelta] {
        &self.deltas
    }

    pub fn codebase_ref(&self) -> &str {
        &self.codebase_ref
    }

    /// `self ⊕ delta`: a new state with `delta` as its last layer.
    pub fn apply_delta(&self, delta: &EnvDelta) -> Result<Self, StateError> {
        delta.validate()?;
        let mut next = self.clone();
        next.deltas.push(delta.clone());
        Ok(next)
    }

    /// The state with every layer removed.
    pub fn root(&self) -> Self {
        Self { base: self.base.clone(), deltas: Vec::new(), codebase_ref: self.codebase_ref.clone() }
    }

    /// All directives of all layers in order.
    pub fn flattened_lines(&self) -> impl Iterator<Item = &String> {
        self.deltas.iter().flat_map(|d| d.dockerfile_lines.iter())
    }

    /// All code patches of all layers in order.
    pub fn flattened_patches(&self) -> impl Iterator<Item = &CodePatch> {
        self.deltas.iter().flat_map(|d| d.code_patches.iter())
    }

    /// Hex SHA-256 over a length-prefixed encoding of base, codebase, and the
    /// flattened delta content.
    pub fn fingerprint(&self) -> String {
        fn field(h: &mut Sha256, tag: u8, bytes: &[u8]) {
            h.update([tag]);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        }
        let mut h = Sha256::new();
        field(&mut h, b'B', self.base.name.as_bytes());
        field(&mut h, b'T', self.base.tag.as_bytes());
        field(&mut h, b'C', self.codebase_ref.as_bytes());
        for line in self.flattened_lines() {
            field(&mut h, b'L', line.as_bytes());
        }
        for patch in self.flattened_patches() {
            field(&mut h, b'P', patch.path.as_bytes());
            field(&mut h, b'Q', patch.content.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn short_fingerprint(&self) -> String {
        self.fingerprint()[..12].to_string()
    }

    /// Canonical text document: `BASE`, `CODEBASE`, then one `DELTA` block per
    /// layer whose directive lines are verbatim appendable build-file text.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str(DOC_HEADER);
        out.push('\n');
        out.push_str(&format!("BASE {} {}\n", self.base.name, self.base.tag));
        out.push_str(&format!("CODEBASE {}\n", self.codebase_ref));
        for delta in &self.deltas {
            out.push_str(&format!(
                "DELTA lines={} patches={}\n",
                delta.dockerfile_lines.len(),
                delta.code_patches.len()
            ));
            out.push_str(&delta.dockerfile_text());
            for patch in &delta.code_patches {
                out.push_str(&format!("PATCH bytes={} {}\n", patch.content.len(), patch.path));
                out.push_str(&patch.content);
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(doc: &str) -> Result<Self, StateError> {
        let mut cur = Cursor { rest: doc, line: 0 };
        let malformed = |line: usize, reason: &str| StateError::Malformed { line, reason: reason.into() };

        let header = cur.next_line().ok_or_else(|| malformed(1, "empty document"))?;
        if header != DOC_HEADER {
            return Err(malformed(cur.line, "unknown header"));
        }
        let base_line = cur.next_line().ok_or_else(|| malformed(cur.line, "missing BASE"))?;
        let base = match base_line.strip_prefix("BASE ").and_then(|r| r.split_once(' ')) {
            Some((name, tag)) => BaseImageRef::new(name, tag)?,
            None => return Err(malformed(cur.line, "expected BASE <name> <tag>")),
        };
        let code_line = cur.next_line().ok_or_else(|| malformed(cur.line, "missing CODEBASE"))?;
        let codebase =
            code_line.strip_prefix("CODEBASE ").ok_or_else(|| malformed(cur.line, "expected CODEBASE <ref>"))?;
        let mut state = Self::new(base, codebase)?;

        while let Some(block) = cur.next_line() {
            let counts = block
                .strip_prefix("DELTA lines=")
                .and_then(|r| r.split_once(" patches="))
                .and_then(|(l, p)| Some((l.parse::<usize>().ok()?, p.parse::<usize>().ok()?)));
            let (n_lines, n_patches) =
                counts.ok_or_else(|| malformed(cur.line, "expected DELTA lines=<n> patches=<m>"))?;
            let mut lines = Vec::with_capacity(n_lines);
            for _ in 0..n_lines {
                let mut physical = Vec::new();
                loop {
                    let p = cur.next_line().ok_or_else(|| malformed(cur.line, "truncated DELTA"))?;
                    physical.push(p);
                    if !p.trim_end().ends_with('\\') {
                        break;
                    }
                }
                lines.push(physical.join("\n"));
            }
            let mut patches = Vec::with_capacity(n_patches);
            for _ in 0..n_patches {
                let head = cur.next_line().ok_or_else(|| malformed(cur.line, "truncated PATCH"))?;
                let (len, path) = head
                    .strip_prefix("PATCH bytes=")
                    .and_then(|r| r.split_once(' '))
                    .and_then(|(n, p)| Some((n.parse::<usize>().ok()?, p)))
                    .ok_or_else(|| malformed(cur.line, "expected PATCH bytes=<n> <path>"))?;
                let content = cur.take_bytes(len).ok_or_else(|| malformed(cur.line, "truncated patch body"))?;
                patches.push(CodePatch { path: path.to_string(), content: content.to_string() });
            }
            state = state.apply_delta(&EnvDelta::new(lines, patches)?)?;
        }
        Ok(state)
    }
}

struct Cursor<'a> {
    rest: &'a str,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn next_line(&mut self) -> Option<&'a str> {
        if self.rest.is_empty() {
            return None;
        }
        self.line += 1;
        match self.rest.find('\n') {
            Some(i) => {
                let l = &self.rest[..i];
                self.rest = &self.rest[i + 1..];
                Some(l)
            }
            None => {
                let l = self.rest;
                self.rest = "";
                Some(l)
            }
        }
    }

    /// Takes exactly `n` bytes followed by a newline.
    fn take_bytes(&mut self, n: usize) -> Option<&'a str> {
        let body = self.rest.get(..n)?;
        let after = self.rest.get(n..)?;
        let after = after.strip_prefix('\n')?;
        self.line += body.matches('\n').count() + 1;
        self.rest = after;
        Some(body)
    }
}

/// A verified healthy environment: every test in its inventory passes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldInstance {
    pub state: EnvironmentState,
    pub repo_name: String,
    pub test_inventory: Vec<TestId>,
    pub image_tag: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gold() -> EnvironmentState {
        EnvironmentState::new("task-pandas:latest".parse().unwrap(), "pandas@abc123").unwrap()
    }

    fn delta(lines: &[&str]) -> EnvDelta {
        EnvDelta::new(lines.iter().map(|s| s.to_string()).collect(), vec![]).unwrap()
    }

    #[test]
    fn empty_delta_is_rejected() {
        assert!(matches!(EnvDelta::new(vec![], vec![]), Err(StateError::InvalidDelta(_))));
        let d = delta(&["RUN a"]);
        let empty = EnvDelta { dockerfile_lines: vec![], code_patches: vec![] };
        assert!(gold().apply_delta(&empty).is_err());
        assert!(compose_deltas(&d, &empty).is_err());
    }

    #[test]
    fn blank_line_and_escaping_patch_rejected() {
        assert!(EnvDelta::new(vec!["  ".into()], vec![]).is_err());
        let escape = CodePatch { path: "../etc/passwd".into(), content: "x".into() };
        assert!(EnvDelta::new(vec![], vec![escape]).is_err());
        let abs = CodePatch { path: "/etc/passwd".into(), content: "x".into() };
        assert!(EnvDelta::new(vec![], vec![abs]).is_err());
        let ok = CodePatch { path: "src/a..b.py".into(), content: "x".into() };
        assert!(EnvDelta::new(vec![], vec![ok]).is_ok());
    }

    #[test]
    fn apply_appends_last_layer() {
        let s = gold().apply_delta(&delta(&["RUN a"])).unwrap();
        let s2 = s.apply_delta(&delta(&["RUN b"])).unwrap();
        assert_eq!(s2.deltas().len(), 2);
        assert_eq!(s2.deltas()[1].dockerfile_lines(), ["RUN b".to_string()]);
        assert_eq!(s2.base(), gold().base());
        assert_eq!(s2.codebase_ref(), "pandas@abc123");
    }

    #[test]
    fn compose_concatenates() {
        let c = compose_deltas(&delta(&["RUN a"]), &delta(&["RUN b"])).unwrap();
        assert_eq!(c.dockerfile_lines(), ["RUN a".to_string(), "RUN b".to_string()]);
    }

    #[test]
    fn fingerprint_associative_over_layers() {
        let (a, b) = (delta(&["RUN a"]), delta(&["RUN b", "ENV X=1"]));
        let stepwise = gold().apply_delta(&a).unwrap().apply_delta(&b).unwrap();
        let composed = gold().apply_delta(&compose_deltas(&a, &b).unwrap()).unwrap();
        assert_eq!(stepwise.fingerprint(), composed.fingerprint());
        assert_ne!(stepwise.fingerprint(), gold().fingerprint());
        assert_eq!(gold().fingerprint(), gold().fingerprint());
    }

    #[test]
    fn base_ref_parsing() {
        let b: BaseImageRef = "localhost:5000/team/img".parse().unwrap();
        assert_eq!((b.name(), b.tag()), ("localhost:5000/team/img", "latest"));
        let b: BaseImageRef = "task-pandas:latest".parse().unwrap();
        assert_eq!(b.to_string(), "task-pandas:latest");
        assert!("".parse::<BaseImageRef>().is_err());
        assert!("img:".parse::<BaseImageRef>().is_err());
    }

    #[test]
    fn test_id_canonical_form_and_covering() {
        let t: TestId = "tests/a.py::TestX::test_y[1]".parse().unwrap();
        assert_eq!(t.path(), "tests/a.py");
        assert_eq!(t.selector(), Some("TestX::test_y[1]"));
        assert_eq!(t.to_string(), "tests/a.py::TestX::test_y[1]");
        let file: TestId = "tests/a.py".parse().unwrap();
        let class: TestId = "tests/a.py::TestX".parse().unwrap();
        let func: TestId = "tests/a.py::TestX::test_y".parse().unwrap();
        assert!(file.covers(&t) && class.covers(&t) && func.covers(&t));
        assert!(!"tests/a.py::TestXY".parse::<TestId>().unwrap().covers(&t));
        assert!(!t.covers(&file));
        assert!("".parse::<TestId>().is_err());
        assert!("a b.py".parse::<TestId>().is_err());
        assert!("a.py::".parse::<TestId>().is_err());
    }

    #[test]
    fn serialize_roundtrip_with_patches_and_continuations() {
        let d1 = EnvDelta::new(
            vec!["RUN dd if=/dev/zero of=x \\\n    bs=1 count=24".into(), "ENV A=1".into()],
            vec![CodePatch { path: "src/m.py".into(), content: "line1\nPATCH bytes=3 fake\n".into() }],
        )
        .unwrap();
        let s = gold().apply_delta(&d1).unwrap().apply_delta(&delta(&["RUN rm -rf /x"])).unwrap();
        let doc = s.serialize();
        assert_eq!(EnvironmentState::parse(&doc).unwrap(), s);
        assert!(doc.contains("RUN dd if=/dev/zero of=x \\\n    bs=1 count=24\nENV A=1\n"));
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(EnvironmentState::parse("").is_err());
        assert!(EnvironmentState::parse("envstate 1\nBASE a\n").is_err());
        assert!(EnvironmentState::parse("envstate 1\nBASE a b\nCODEBASE c\nDELTA lines=2 patches=0\nRUN x\n").is_err());
    }
}
