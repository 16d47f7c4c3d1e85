//! Environment builds, command execution and test runs, against either a
//! container runtime or an in-process simulated environment.

mod container;
mod process;
mod sim;

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::{EnvironmentState, TestId};
use crate::testrun::TestRunReport;

pub use container::{image_tag, BuildGate, BuildPermit, ContainerBackend, ContainerRuntime, DockerCli, PATCH_DIR};
pub use process::run_with_timeout;
pub use sim::{Predicate, SimBackend, SimFile, SimPackage, SimScenario, SimTest, SIM_VERBS};

/// Exit code reported for a command killed at its time limit.
pub const KILLED_EXIT_CODE: i32 = 137;
/// Where the codebase lives inside every environment.
pub const CODEBASE_ROOT: &str = "/testbed";
/// Path the rendered test script is written to and run from.
pub const TEST_SCRIPT_PATH: &str = "/run-tests.sh";
pub const TEST_LOG_PATH: &str = "/test.log";
pub const LOGS_DIR: &str = "/logs";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SandboxError {
    #[error("environment build failed: {0}")]
    BuildFailed(String),
    #[error("simulated backend cannot interpret {0:?}")]
    UnknownSimOp(String),
    #[error("session {0} is not live")]
    SessionDead(String),
    #[error("no simulated scenario for base image {0}")]
    UnknownScenario(String),
    #[error("invalid mounts: {0}")]
    InvalidMount(String),
    #[error("sandbox i/o: {0}")]
    Io(String),
    #[error("container runtime: {0}")]
    Runtime(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Container,
    #[serde(alias = "sim")]
    Simulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MountMode {
    ReadOnly,
    ReadWrite,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MountSpec {
    pub host_path: PathBuf,
    pub guest_path: String,
    pub mode: MountMode,
}

impl MountSpec {
    pub fn read_write(host_path: impl Into<PathBuf>, guest_path: impl Into<String>) -> Self {
        Self { host_path: host_path.into(), guest_path: guest_path.into(), mode: MountMode::ReadWrite }
    }
}

/// Rejects relative or duplicate guest paths.
pub fn check_mounts(mounts: &[MountSpec]) -> Result<(), SandboxError> {
    let mut seen = std::collections::HashSet::new();
    for m in mounts {
        if !m.guest_path.starts_with('/') {
            return Err(SandboxError::InvalidMount(format!("guest path must be absolute: {}", m.guest_path)));
        }
        if !seen.insert(m.guest_path.trim_end_matches('/')) {
            return Err(SandboxError::InvalidMount(format!("duplicate guest path {}", m.guest_path)));
        }
    }
    Ok(())
}

/// Host location backing `guest`, if a mount covers it.
pub fn host_path_for(mounts: &[MountSpec], guest: &str) -> Option<PathBuf> {
    mounts.iter().find_map(|m| {
        let root = m.guest_path.trim_end_matches('/');
        let rest = guest.strip_prefix(root)?;
        if rest.is_empty() {
            Some(m.host_path.clone())
        } else {
            rest.strip_prefix('/').map(|r| m.host_path.join(r))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxHandle {
    pub backend: BackendKind,
    pub state_fingerprint: String,
    pub session_id: String,
    pub mounts: Vec<MountSpec>,
}

impl SandboxHandle {
    pub fn host_logs_dir(&self) -> Option<PathBuf> {
        host_path_for(&self.mounts, LOGS_DIR)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecResult {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    /// Seconds.
    pub duration: f64,
    pub timed_out: bool,
}

impl ExecResult {
    pub fn success(&self) -> bool {
        self.exit_code == 0 && !self.timed_out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildOptions {
    pub mounts: Vec<MountSpec>,
    /// Rebuild even when an image for this state already exists.
    pub no_cache: bool,
}

impl BuildOptions {
    pub fn with_logs(host_dir: &Path) -> Self {
        Self { mounts: vec![MountSpec::read_write(host_dir, LOGS_DIR)], no_cache: false }
    }

    pub fn fresh(mut self) -> Self {
        self.no_cache = true;
        self
    }
}

pub trait SandboxBackend: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// Builds (or reuses) the environment for `state` and starts a session on it.
    fn build_state(&self, state: &EnvironmentState, options: &BuildOptions) -> Result<SandboxHandle, SandboxError>;

    fn exec_command(
        &self,
        handle: &SandboxHandle,
        command: &str,
        timeout: Duration,
    ) -> Result<ExecResult, SandboxError>;

    fn write_file(&self, handle: &SandboxHandle, guest_path: &str, content: &str) -> Result<(), SandboxError>;

    /// `Ok(None)` when the file does not exist.
    fn read_file(&self, handle: &SandboxHandle, guest_path: &str) -> Result<Option<String>, SandboxError>;

    fn run_test_script(&self, handle: &SandboxHandle, selected: &[TestId]) -> Result<TestRunReport, SandboxError>;

    /// Releases the session. Idempotent; mounted host directories stay.
    fn teardown(&self, handle: &SandboxHandle);
}

/// Copies the raw log next to the other artifacts when `/logs` is mounted.
pub(crate) fn keep_log(handle: &SandboxHandle, log: &str, report: &mut TestRunReport) {
    if let Some(dir) = handle.host_logs_dir() {
        let path = dir.join("test.log");
        match std::fs::create_dir_all(&dir).and_then(|_| std::fs::write(&path, log)) {
            Ok(()) => report.raw_log_path = Some(path),
            Err(e) => tracing::warn!(error = %e, "could not keep test log"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mount_resolution_and_checks() {
        let mounts = vec![MountSpec::read_write("/host/run1", "/logs")];
        assert_eq!(host_path_for(&mounts, "/logs/Dockerfile"), Some(PathBuf::from("/host/run1/Dockerfile")));
        assert_eq!(host_path_for(&mounts, "/logs"), Some(PathBuf::from("/host/run1")));
        assert_eq!(host_path_for(&mounts, "/logsx/a"), None);
        assert!(check_mounts(&mounts).is_ok());
        let dup = vec![MountSpec::read_write("/a", "/logs"), MountSpec::read_write("/b", "/logs/")];
        assert!(check_mounts(&dup).is_err());
        assert!(check_mounts(&[MountSpec::read_write("/a", "logs")]).is_err());
    }
}
