//! Run configuration, loaded from TOML. Relative paths resolve against the
//! directory holding the config file.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentSpec, DriveLimits};
use crate::llm::{ChatProvider, HttpProvider, LlmError, MockProvider, MockScript, ProviderConfig, RetryPolicy};
use crate::prompt::{DirectionCatalog, GuidanceLevel, PromptError};
use crate::sandbox::{BackendKind, ContainerBackend, DockerCli, SandboxBackend, SandboxError, SimBackend, SimScenario};
use crate::trajectory::{CheatRules, TrajectoryError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub provider: ProviderKind,
    pub model: String,
    pub endpoint: Option<String>,
    /// Environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub timeout_secs: f64,
    pub retry: RetryPolicy,
    pub temperature: f64,
    pub max_tokens: u32,
    pub mock_script: Option<PathBuf>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Mock,
            model: "generator".into(),
            endpoint: None,
            api_key_env: None,
            timeout_secs: 120.0,
            retry: RetryPolicy::default(),
            temperature: 0.7,
            max_tokens: 4096,
            mock_script: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxConfig {
    pub backend: BackendKind,
    /// Scenario files for the simulated backend.
    pub scenarios: Vec<PathBuf>,
    pub docker: String,
    pub max_concurrent_builds: usize,
    pub test_timeout_secs: f64,
    /// Passed to `--memory` when set, e.g. "4g".
    pub memory_limit: Option<String>,
    /// Passed to `--cpus` when set.
    pub cpu_limit: Option<f64>,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Simulated,
            scenarios: Vec::new(),
            docker: "docker".into(),
            max_concurrent_builds: 4,
            test_timeout_secs: 1800.0,
            memory_limit: None,
            cpu_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// Direction catalog; the built-in one when unset.
    pub directions: Option<PathBuf>,
    pub tasks_per_gold: usize,
    pub refine_probability: f64,
    /// Fixed issue guidance level; drawn per task when unset.
    pub guidance: Option<GuidanceLevel>,
    pub budget_secs: f64,
    pub command_timeout_secs: f64,
    pub max_agent_steps: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let limits = DriveLimits::default();
        Self {
            directions: None,
            tasks_per_gold: 8,
            refine_probability: 0.5,
            guidance: None,
            budget_secs: limits.budget,
            command_timeout_secs: limits.command_timeout,
            max_agent_steps: limits.max_steps,
        }
    }
}

impl GenerationConfig {
    pub fn limits(&self) -> DriveLimits {
        DriveLimits {
            budget: self.budget_secs,
            command_timeout: self.command_timeout_secs,
            max_steps: self.max_agent_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub budget_secs: f64,
    pub command_timeout_secs: f64,
    pub max_agent_steps: usize,
    /// Cheat rule file; the built-in rules when unset.
    pub cheat_rules: Option<PathBuf>,
}

impl Default for CollectConfig {
    fn default() -> Self {
        let limits = DriveLimits::default();
        Self {
            budget_secs: limits.budget,
            command_timeout_secs: limits.command_timeout,
            max_agent_steps: limits.max_steps,
            cheat_rules: None,
        }
    }
}

impl CollectConfig {
    pub fn limits(&self) -> DriveLimits {
        DriveLimits {
            budget: self.budget_secs,
            command_timeout: self.command_timeout_secs,
            max_steps: self.max_agent_steps,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; 0 picks the number of cores.
    pub jobs: usize,
    /// Gold descriptions used when a command is given none.
    pub golds: Vec<PathBuf>,
    pub llm: LlmConfig,
    pub sandbox: SandboxConfig,
    pub generation: GenerationConfig,
    pub collect: CollectConfig,
    pub degradation_agent: AgentSpec,
    pub solver_agent: AgentSpec,
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn rebase_agent(base: &Path, spec: &mut AgentSpec) {
    if let AgentSpec::Scripted { script } = spec {
        rebase(base, script);
    }
}

impl PipelineConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_path_buf(), reason: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        self.golds.iter_mut().for_each(|p| rebase(base, p));
        self.sandbox.scenarios.iter_mut().for_each(|p| rebase(base, p));
        for p in [&mut self.llm.mock_script, &mut self.generation.directions, &mut self.collect.cheat_rules]
            .into_iter()
            .flatten()
        {
            rebase(base, p);
        }
        rebase_agent(base, &mut self.degradation_agent);
        rebase_agent(base, &mut self.solver_agent);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn jobs(&self) -> usize {
        if self.jobs > 0 {
            self.jobs
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }

    pub fn provider(&self) -> Result<Box<dyn ChatProvider>, ConfigError> {
        let llm = &self.llm;
        match llm.provider {
            ProviderKind::Mock => {
                let path = llm
                    .mock_script
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid("mock provider needs llm.mock_script".into()))?;
                Ok(Box::new(MockProvider::new(MockScript::load(path)?)))
            }
            ProviderKind::Http => {
                let endpoint = llm
                    .endpoint
                    .clone()
                    .ok_or_else(|| ConfigError::Invalid("http provider needs llm.endpoint".into()))?;
                let cfg = ProviderConfig {
                    endpoint,
                    api_key_env: llm.api_key_env.clone(),
                    timeout_secs: llm.timeout_secs,
                    retry: llm.retry.clone(),
                };
                Ok(Box::new(HttpProvider::new(cfg)?))
            }
        }
    }

    pub fn backend(&self) -> Result<Arc<dyn SandboxBackend>, ConfigError> {
        let sb = &self.sandbox;
        match sb.backend {
            BackendKind::Simulated => {
                let scenarios = sb.scenarios.iter().map(|p| SimScenario::load(p)).collect::<Result<Vec<_>, _>>()?;
                if scenarios.is_empty() {
                    return Err(ConfigError::Invalid("simulated backend needs sandbox.scenarios".into()));
                }
                Ok(Arc::new(SimBackend::new(scenarios)))
            }
            BackendKind::Container => {
                if sb.max_concurrent_builds == 0 {
                    return Err(ConfigError::Invalid("sandbox.max_concurrent_builds must be positive".into()));
                }
                let runtime =
                    Arc::new(DockerCli::new(sb.docker.clone()).with_limits(sb.memory_limit.clone(), sb.cpu_limit));
                Ok(Arc::new(
                    ContainerBackend::new(runtime, sb.max_concurrent_builds)
                        .with_test_timeout(Duration::from_secs_f64(sb.test_timeout_secs)),
                ))
            }
        }
    }

    pub fn catalog(&self) -> Result<DirectionCatalog, ConfigError> {
        Ok(match &self.generation.directions {
            Some(p) => DirectionCatalog::load(p)?,
            None => DirectionCatalog::builtin(),
        })
    }

    pub fn cheat_rules(&self) -> Result<CheatRules, ConfigError> {
        Ok(match &self.collect.cheat_rules {
            Some(p) => CheatRules::load(p)?,
            None => CheatRules::default(),
        })
    }
}
