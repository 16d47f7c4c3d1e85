use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use super::{
    check_mounts, keep_log, run_with_timeout, BackendKind, BuildOptions, ExecResult, MountMode, MountSpec,
    SandboxBackend, SandboxError, SandboxHandle, CODEBASE_ROOT, TEST_LOG_PATH, TEST_SCRIPT_PATH,
};
use crate::state::{EnvironmentState, TestId};
use crate::testrun::{parse_verbose_log, render_run_script, TestRunReport};
use crate::util::slugify;

/// Build-context directory holding code patch files for `COPY`.
pub const PATCH_DIR: &str = "envinvert-patches";

/// The container operations the backend needs.
pub trait ContainerRuntime: Send + Sync {
    fn image_exists(&self, tag: &str) -> Result<bool, SandboxError>;
    /// Builds `context/Dockerfile` as `tag`. Failures carry the build log.
    fn build(&self, context: &Path, tag: &str, no_cache: bool) -> Result<(), SandboxError>;
    /// Starts a long-lived container and returns its id.
    fn start(&self, tag: &str, mounts: &[MountSpec]) -> Result<String, SandboxError>;
    fn exec(
        &self,
        container: &str,
        command: &str,
        stdin: Option<&[u8]>,
        timeout: Duration,
    ) -> Result<ExecResult, SandboxError>;
    fn remove(&self, container: &str) -> Result<(), SandboxError>;
}

/// Drives `docker` (or a CLI-compatible runtime) as a subprocess.
#[derive(Debug, Clone)]
pub struct DockerCli {
    program: String,
    build_timeout: Duration,
    memory_limit: Option<String>,
    cpu_limit: Option<f64>,
}

impl Default for DockerCli {
    fn default() -> Self {
        Self::new("docker")
    }
}

impl DockerCli {
    pub fn new(program: impl Into<String>) -> Self {
        Self { program: program.into(), build_timeout: Duration::from_secs(3600), memory_limit: None, cpu_limit: None }
    }

    pub fn with_limits(mut self, memory: Option<String>, cpus: Option<f64>) -> Self {
        self.memory_limit = memory;
        self.cpu_limit = cpus;
        self
    }

    fn run_args(&self, tag: &str, mounts: &[MountSpec]) -> Vec<String> {
        let mut args: Vec<String> = vec!["run".into(), "-d".into(), "--entrypoint".into(), "sleep".into()];
        if let Some(m) = &self.memory_limit {
            args.extend(["--memory".into(), m.clone()]);
        }
        if let Some(c) = self.cpu_limit {
            args.extend(["--cpus".into(), c.to_string()]);
        }
        for m in mounts {
            let suffix = if m.mode == MountMode::ReadOnly { ":ro" } else { "" };
            args.push("-v".into());
            args.push(format!("{}:{}{suffix}", m.host_path.display(), m.guest_path));
        }
        args.push(tag.into());
        args.push("infinity".into());
        args
    }

    /// Whether the runtime answers; false when the binary or daemon is missing.
    pub fn available(&self) -> bool {
        let mut cmd = Command::new(&self.program);
        cmd.args(["info", "--format", "{{.ServerVersion}}"]);
        run_with_timeout(cmd, None, Duration::from_secs(20)).is_ok_and(|r| r.success())
    }

    fn cmd(&self, args: &[&str]) -> Command {
        let mut c = Command::new(&self.program);
        c.args(args);
        c
    }

    fn run(&self, args: &[&str], timeout: Duration) -> Result<ExecResult, SandboxError> {
        run_with_timeout(self.cmd(args), None, timeout)
            .map_err(|e| SandboxError::Runtime(format!("{}: {e}", self.program)))
    }
}

impl ContainerRuntime for DockerCli {
    fn image_exists(&self, tag: &str) -> Result<bool, SandboxError> {
        Ok(self.run(&["image", "inspect", tag], Duration::from_secs(60))?.success())
    }

    fn build(&self, context: &Path, tag: &str, no_cache: bool) -> Result<(), SandboxError> {
        let ctx = context.to_string_lossy();
        let mut args = vec!["build", "-t", tag];
        if no_cache {
            args.push("--no-cache");
        }
        args.push(&ctx);
        let r = self.run(&args, self.build_timeout)?;
        if r.success() {
            Ok(())
        } else {
            Err(SandboxError::BuildFailed(format!("{}{}", r.stdout, r.stderr)))
        }
    }

    fn start(&self, tag: &str, mounts: &[MountSpec]) -> Result<String, SandboxError> {
        for m in mounts {
            std::fs::create_dir_all(&m.host_path).map_err(|e| SandboxError::Io(e.to_string()))?;
        }
        let args = self.run_args(tag, mounts);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let r = self.run(&refs, Duration::from_secs(300))?;
        if !r.success() {
            return Err(SandboxError::Runtime(format!("starting {tag}: {}", r.stderr.trim())));
        }
        Ok(r.stdout.trim().to_string())
    }

    fn exec(
        &self,
        container: &str,
        command: &str,
        stdin: Option<&[u8]>,
        timeout: Duration,
    ) -> Result<ExecResult, SandboxError> {
        let mut cmd = Command::new(&self.program);
        cmd.arg("exec");
        if stdin.is_some() {
            cmd.arg("-i");
        }
        cmd.args([container, "bash", "-c", command]);
        run_with_timeout(cmd, stdin, timeout).map_err(|e| SandboxError::Runtime(e.to_string()))
    }

    fn remove(&self, container: &str) -> Result<(), SandboxError> {
        let r = self.run(&["rm", "-f", container], Duration::from_secs(120))?;
        if r.success() {
            Ok(())
        } else {
            Err(SandboxError::Runtime(r.stderr))
        }
    }
}

/// Counting semaphore capping concurrent image builds.
#[derive(Debug)]
pub struct BuildGate {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

pub struct BuildPermit<'a>(&'a BuildGate);

impl Drop for BuildPermit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().expect("gate") -= 1;
        self.0.freed.notify_one();
    }
}

impl BuildGate {
    pub fn new(max: usize) -> Self {
        Self { max: max.max(1), active: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> BuildPermit<'_> {
        let mut active = self.active.lock().expect("gate");
        while *active >= self.max {
            active = self.freed.wait(active).expect("gate");
        }
        *active += 1;
        BuildPermit(self)
    }
}

/// Build file for `state`: the base, then code patches as `COPY`, then directives.
pub(crate) fn build_file(state: &EnvironmentState) -> (String, Vec<(String, String)>) {
    let mut text = format!("FROM {}\n", state.base());
    let mut files = Vec::new();
    for (i, patch) in state.flattened_patches().enumerate() {
        let name = format!("{PATCH_DIR}/{i}");
        text.push_str(&format!("COPY {name} {CODEBASE_ROOT}/{}\n", patch.path));
        files.push((name, patch.content.clone()));
    }
    for line in state.flattened_lines() {
        text.push_str(line);
        text.push('\n');
    }
    (text, files)
}

/// Image tag for a state; the root state uses its base image directly.
pub fn image_tag(state: &EnvironmentState) -> String {
    if state.deltas().is_empty() {
        state.base().to_string()
    } else {
        format!("envinvert-{}:{}", slugify(state.base().name()), state.short_fingerprint())
    }
}

pub struct ContainerBackend {
    runtime: Arc<dyn ContainerRuntime>,
    gate: BuildGate,
    sessions: Mutex<HashMap<String, String>>,
    next_session: AtomicU64,
    test_timeout: Duration,
}

impl std::fmt::Debug for ContainerBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ContainerBackend").field("gate", &self.gate).finish_non_exhaustive()
    }
}

impl ContainerBackend {
    pub fn new(runtime: Arc<dyn ContainerRuntime>, max_concurrent_builds: usize) -> Self {
        Self {
            runtime,
            gate: BuildGate::new(max_concurrent_builds),
            sessions: Mutex::new(HashMap::new()),
            next_session: AtomicU64::new(0),
            test_timeout: Duration::from_secs(1800),
        }
    }

    pub fn with_test_timeout(mut self, timeout: Duration) -> Self {
        self.test_timeout = timeout;
        self
    }

    fn container(&self, handle: &SandboxHandle) -> Result<String, SandboxError> {
        self.sessions
            .lock()
            .expect("session table")
            .get(&handle.session_id)
            .cloned()
            .ok_or_else(|| SandboxError::SessionDead(handle.session_id.clone()))
    }

    fn ensure_image(&self, state: &EnvironmentState, no_cache: bool) -> Result<String, SandboxError> {
        let tag = image_tag(state);
        if state.deltas().is_empty() {
            return Ok(tag);
        }
        if !no_cache && self.runtime.image_exists(&tag)? {
            tracing::debug!(%tag, "image cache hit");
            return Ok(tag);
        }
        let _permit = self.gate.acquire();
        let ctx = tempfile::tempdir().map_err(|e| SandboxError::Io(e.to_string()))?;
        let (dockerfile, files) = build_file(state);
        let io = |e: std::io::Error| SandboxError::Io(e.to_string());
        std::fs::write(ctx.path().join("Dockerfile"), dockerfile).map_err(io)?;
        for (name, content) in files {
            let path = ctx.path().join(name);
            std::fs::create_dir_all(path.parent().expect("patch file parent")).map_err(io)?;
            std::fs::write(path, content).map_err(io)?;
        }
        tracing::info!(%tag, "building image");
        self.runtime.build(ctx.path(), &tag, no_cache)?;
        Ok(tag)
    }
}

fn quote(s: &str) -> String {
    shlex::try_quote(s).map(|q| q.into_owned()).unwrap_or_else(|_| format!("'{}'", s.replace('\0', "")))
}

impl SandboxBackend for ContainerBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Container
    }

    fn build_state(&self, state: &EnvironmentState, options: &BuildOptions) -> Result<SandboxHandle, SandboxError> {
        check_mounts(&options.mounts)?;
        let tag = self.ensure_image(state, options.no_cache)?;
        let container = self.runtime.start(&tag, &options.mounts)?;
        let id = format!("ctr-{:06}", self.next_session.fetch_add(1, Ordering::Relaxed));
        self.sessions.lock().expect("session table").insert(id.clone(), container);
        Ok(SandboxHandle {
            backend: BackendKind::Container,
            state_fingerprint: state.fingerprint(),
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
        let container = self.container(handle)?;
        self.runtime.exec(&container, command, None, timeout)
    }

    fn write_file(&self, handle: &SandboxHandle, guest_path: &str, content: &str) -> Result<(), SandboxError> {
        let container = self.container(handle)?;
        let p = quote(guest_path);
        let script = format!("mkdir -p \"$(dirname {p})\" && cat > {p}");
        let r = self.runtime.exec(&container, &script, Some(content.as_bytes()), Duration::from_secs(120))?;
        if r.success() {
            Ok(())
        } else {
            Err(SandboxError::Io(format!("writing {guest_path}: {}", r.stderr.trim())))
        }
    }

    fn read_file(&self, handle: &SandboxHandle, guest_path: &str) -> Result<Option<String>, SandboxError> {
        let container = self.container(handle)?;
        let p = quote(guest_path);
        let r = self.runtime.exec(&container, &format!("test -f {p} && cat {p}"), None, Duration::from_secs(120))?;
        Ok(r.success().then_some(r.stdout))
    }

    fn run_test_script(&self, handle: &SandboxHandle, selected: &[TestId]) -> Result<TestRunReport, SandboxError> {
        let script = render_run_script(selected).map_err(|e| SandboxError::Io(e.to_string()))?;
        self.write_file(handle, TEST_SCRIPT_PATH, &script)?;
        let container = self.container(handle)?;
        let cleanup = format!("rm -f {TEST_LOG_PATH}");
        self.runtime.exec(&container, &cleanup, None, Duration::from_secs(60))?;
        let run =
            self.runtime.exec(&container, &format!("cd / && bash {TEST_SCRIPT_PATH}"), None, self.test_timeout)?;
        if run.timed_out {
            tracing::warn!(session = %handle.session_id, "test script timed out");
        }
        let log = self.read_file(handle, TEST_LOG_PATH)?.unwrap_or_default();
        let mut report = parse_verbose_log(&log);
        keep_log(handle, &log, &mut report);
        Ok(report)
    }

    fn teardown(&self, handle: &SandboxHandle) {
        let container = self.sessions.lock().expect("session table").remove(&handle.session_id);
        if let Some(container) = container {
            if let Err(e) = self.runtime.remove(&container) {
                tracing::warn!(error = %e, %container, "container removal failed");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;
    use std::sync::atomic::AtomicUsize;

    use super::*;
    use crate::state::{CodePatch, EnvDelta};

    /// Records builds; containers answer every command successfully.
    #[derive(Default)]
    struct CountingRuntime {
        images: Mutex<HashSet<String>>,
        builds: AtomicUsize,
        running: AtomicUsize,
        peak: AtomicUsize,
        last_dockerfile: Mutex<String>,
        build_delay: Duration,
    }

    impl ContainerRuntime for CountingRuntime {
        fn image_exists(&self, tag: &str) -> Result<bool, SandboxError> {
            Ok(self.images.lock().unwrap().contains(tag))
        }

        fn build(&self, context: &Path, tag: &str, _no_cache: bool) -> Result<(), SandboxError> {
            let now = self.running.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(self.build_delay);
            *self.last_dockerfile.lock().unwrap() = std::fs::read_to_string(context.join("Dockerfile")).unwrap();
            self.builds.fetch_add(1, Ordering::SeqCst);
            self.images.lock().unwrap().insert(tag.to_string());
            self.running.fetch_sub(1, Ordering::SeqCst);
            Ok(())
        }

        fn start(&self, tag: &str, _mounts: &[MountSpec]) -> Result<String, SandboxError> {
            Ok(format!("c-{tag}"))
        }

        fn exec(&self, _: &str, _: &str, _: Option<&[u8]>, _: Duration) -> Result<ExecResult, SandboxError> {
            Ok(ExecResult {
                exit_code: 0,
                stdout: String::new(),
                stderr: String::new(),
                duration: 0.0,
                timed_out: false,
            })
        }

        fn remove(&self, _: &str) -> Result<(), SandboxError> {
            Ok(())
        }
    }

    fn poor(tag: &str) -> EnvironmentState {
        let base = EnvironmentState::new("task-pandas:latest".parse().unwrap(), "pandas@1").unwrap();
        base.apply_delta(&EnvDelta::new(vec![format!("RUN echo {tag}")], vec![]).unwrap()).unwrap()
    }

    #[test]
    fn second_build_of_same_state_is_cache_hit() {
        let rt = Arc::new(CountingRuntime::default());
        let backend = ContainerBackend::new(rt.clone(), 2);
        let state = poor("a");
        let h1 = backend.build_state(&state, &BuildOptions::default()).unwrap();
        let h2 = backend.build_state(&state, &BuildOptions::default()).unwrap();
        assert_eq!(rt.builds.load(Ordering::SeqCst), 1);
        assert_ne!(h1.session_id, h2.session_id);
        backend.build_state(&state, &BuildOptions::default().fresh()).unwrap();
        assert_eq!(rt.builds.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn root_state_uses_base_image_without_building() {
        let rt = Arc::new(CountingRuntime::default());
        let backend = ContainerBackend::new(rt.clone(), 1);
        let root = poor("a").root();
        backend.build_state(&root, &BuildOptions::default()).unwrap();
        assert_eq!(rt.builds.load(Ordering::SeqCst), 0);
        assert_eq!(image_tag(&root), "task-pandas:latest");
    }

    #[test]
    fn build_file_orders_patches_before_directives() {
        let base = EnvironmentState::new("task-x:latest".parse().unwrap(), "x@1").unwrap();
        let delta = EnvDelta::new(
            vec!["RUN rm -rf /testbed/.git".into()],
            vec![CodePatch { path: "pkg/a.py".into(), content: "x = 1\n".into() }],
        )
        .unwrap();
        let (text, files) = build_file(&base.apply_delta(&delta).unwrap());
        assert_eq!(text, "FROM task-x:latest\nCOPY envinvert-patches/0 /testbed/pkg/a.py\nRUN rm -rf /testbed/.git\n");
        assert_eq!(files, vec![("envinvert-patches/0".to_string(), "x = 1\n".to_string())]);
    }

    #[test]
    fn gate_caps_concurrent_builds() {
        let rt = Arc::new(CountingRuntime { build_delay: Duration::from_millis(40), ..Default::default() });
        let backend = Arc::new(ContainerBackend::new(rt.clone(), 2));
        let threads: Vec<_> = (0..6)
            .map(|i| {
                let b = backend.clone();
                std::thread::spawn(move || b.build_state(&poor(&format!("t{i}")), &BuildOptions::default()).unwrap())
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        assert_eq!(rt.builds.load(Ordering::SeqCst), 6);
        assert!(rt.peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn teardown_is_idempotent_and_kills_session() {
        let backend = ContainerBackend::new(Arc::new(CountingRuntime::default()), 1);
        let h = backend.build_state(&poor("a"), &BuildOptions::default()).unwrap();
        backend.teardown(&h);
        backend.teardown(&h);
        assert!(matches!(backend.exec_command(&h, "true", Duration::from_secs(1)), Err(SandboxError::SessionDead(_))));
    }

    #[test]
    fn resource_limits_reach_the_run_command() {
        let mounts = [MountSpec::read_write("/tmp/l", "/logs")];
        let plain = DockerCli::new("docker").run_args("img:1", &mounts);
        assert_eq!(plain, ["run", "-d", "--entrypoint", "sleep", "-v", "/tmp/l:/logs", "img:1", "infinity"]);
        let limited = DockerCli::new("docker").with_limits(Some("4g".into()), Some(2.5)).run_args("img:1", &[]);
        assert_eq!(
            limited,
            ["run", "-d", "--entrypoint", "sleep", "--memory", "4g", "--cpus", "2.5", "img:1", "infinity"]
        );
    }
}
