//! The generation stages wired together: task specs, inversion, packaging,
//! and solver collection.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};
use crate::harness::{
    assemble_instance, run_inversion, verify_and_classify, HarnessError, InversionOptions, InversionRun, RunVerdict,
};
use crate::llm::{complete, ChatMessage, ChatProvider, ChatRequest, LlmError};
use crate::packager::{emit_bundle, PackageError, Provenance, TaskInstance};
use crate::prompt::{
    build_degradation_prompt, build_issue_prompt, parse_task_spec, sample_inputs, should_refine, DirectionCatalog,
    InversionTaskSpec, IssueStatement, MemoryPool, PromptError, PromptStage,
};
use crate::sandbox::{SandboxBackend, SandboxError, SimScenario};
use crate::state::{BaseImageRef, EnvironmentState, GoldInstance, TestId};
use crate::stats::TokenLedger;
use crate::trajectory::{collect_trajectory, save_trajectory, Trajectory, TrajectoryError};
use crate::util::{derive_seed, sha256_hex};

pub const RUN_FILE: &str = "run.json";
pub const SPEC_FILE: &str = "spec.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Package(#[from] PackageError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("{path}: {reason}")]
    File { path: PathBuf, reason: String },
}

fn file_err(path: &Path, reason: impl ToString) -> PipelineError {
    PipelineError::File { path: path.to_path_buf(), reason: reason.to_string() }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| file_err(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| file_err(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| file_err(path, e))
}

/// A gold environment described by hand, for the container backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldSpec {
    pub repo: String,
    pub base: BaseImageRef,
    pub codebase_ref: String,
    pub tests: Vec<TestId>,
}

/// Reads a gold description: a gold instance JSON, a simulated scenario
/// JSON, or a [`GoldSpec`] TOML file.
pub fn load_gold(path: &Path) -> Result<GoldInstance, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    if path.extension().is_some_and(|x| x == "toml") {
        let spec: GoldSpec = toml::from_str(&text).map_err(|e| file_err(path, e))?;
        let state = EnvironmentState::new(spec.base.clone(), spec.codebase_ref).map_err(|e| file_err(path, e))?;
        return Ok(GoldInstance {
            state,
            repo_name: spec.repo,
            test_inventory: spec.tests,
            image_tag: spec.base.to_string(),
        });
    }
    if let Ok(gold) = serde_json::from_str::<GoldInstance>(&text) {
        return Ok(gold);
    }
    SimScenario::parse(&text).map(|s| s.gold_instance()).map_err(|e| file_err(path, e))
}

/// A generated degradation task with what is needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecRecord {
    pub repo: String,
    pub index: usize,
    pub seed: u64,
    pub refined: bool,
    pub spec: InversionTaskSpec,
    /// Hash of every prompt sent while producing the spec.
    pub prompts_sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub specs: usize,
    pub spec_failures: usize,
    pub runs: usize,
    pub run_failures: BTreeMap<String, usize>,
    pub accepted: usize,
    pub discarded: BTreeMap<String, usize>,
    pub duplicates: usize,
    pub bundles: Vec<String>,
    pub tokens: u64,
}

fn error_kind(e: &PipelineError) -> String {
    let kind = match e {
        PipelineError::Harness(HarnessError::NoDockerfileWritten) => "no_dockerfile",
        PipelineError::Harness(HarnessError::AgentCrashed(_)) => "agent_crashed",
        PipelineError::Harness(HarnessError::InvalidDockerfile(_)) => "invalid_dockerfile",
        PipelineError::Harness(HarnessError::Sandbox(_)) | PipelineError::Sandbox(_) => "sandbox",
        PipelineError::Llm(_) => "llm",
        PipelineError::Prompt(_) => "prompt",
        _ => "other",
    };
    kind.to_string()
}

pub struct Generator {
    pub config: PipelineConfig,
    provider: Box<dyn ChatProvider>,
    catalog: DirectionCatalog,
    backend: Arc<dyn SandboxBackend>,
}

impl Generator {
    pub fn from_config(config: PipelineConfig) -> Result<Self, PipelineError> {
        let provider = config.provider()?;
        let catalog = config.catalog()?;
        let backend = config.backend()?;
        Ok(Self::with_parts(config, provider, catalog, backend))
    }

    pub fn with_parts(
        config: PipelineConfig,
        provider: Box<dyn ChatProvider>,
        catalog: DirectionCatalog,
        backend: Arc<dyn SandboxBackend>,
    ) -> Self {
        Self { config, provider, catalog, backend }
    }

    pub fn backend(&self) -> &dyn SandboxBackend {
        self.backend.as_ref()
    }

    pub fn tokens_used(&self) -> u64 {
        self.provider.tokens_used()
    }

    fn ask(&self, prompt: &str) -> Result<String, LlmError> {
        let mut request = ChatRequest::new(self.config.llm.model.clone(), vec![ChatMessage::user(prompt)]);
        request.temperature = self.config.llm.temperature;
        request.max_tokens = self.config.llm.max_tokens;
        complete(&request, self.provider.as_ref())
    }

    /// One degradation task for `gold`. The draft is kept when refinement
    /// output does not parse.
    pub fn generate_spec(
        &self,
        gold: &GoldInstance,
        pool: &MemoryPool,
        index: usize,
    ) -> Result<SpecRecord, PipelineError> {
        let seed = derive_seed(self.config.seed, &[&gold.repo_name, "task", &index.to_string()]);
        let inputs = sample_inputs(gold, pool, &self.catalog, derive_seed(seed, &["sample"]))?;
        let initial = build_degradation_prompt(&inputs, PromptStage::Initial, None)?;
        let draft = parse_task_spec(&self.ask(&initial)?, &inputs)?.spec;
        let mut prompts = vec![initial];
        let mut spec = draft.clone();
        let mut refined = false;
        if should_refine(derive_seed(seed, &["refine"]), self.config.generation.refine_probability) {
            let prompt = build_degradation_prompt(&inputs, PromptStage::Refine, Some(&draft))?;
            let reply = self.ask(&prompt)?;
            prompts.push(prompt);
            match parse_task_spec(&reply, &inputs) {
                Ok(p) => {
                    spec = p.spec;
                    refined = true;
                }
                Err(e) => tracing::warn!(error = %e, "refined task unusable, keeping the draft"),
            }
        }
        Ok(SpecRecord {
            repo: gold.repo_name.clone(),
            index,
            seed,
            refined,
            spec,
            prompts_sha256: sha256_hex(prompts.join("\n\u{0}\n").as_bytes()),
        })
    }

    /// `count` specs per gold, in order, so the pool grows deterministically.
    pub fn generate_specs(
        &self,
        golds: &[GoldInstance],
        pool: &MemoryPool,
        count: usize,
    ) -> (Vec<SpecRecord>, Vec<(String, usize, PipelineError)>) {
        let mut specs = Vec::new();
        let mut failures = Vec::new();
        for index in 0..count {
            for gold in golds {
                match self.generate_spec(gold, pool, index) {
                    Ok(r) => {
                        pool.push(r.spec.task_name.clone());
                        specs.push(r);
                    }
                    Err(e) => {
                        tracing::warn!(repo = %gold.repo_name, index, error = %e, "task generation failed");
                        failures.push((gold.repo_name.clone(), index, e));
                    }
                }
            }
        }
        (specs, failures)
    }

    /// Degrades, verifies, and records one run under `run_dir`.
    pub fn invert(
        &self,
        gold: &GoldInstance,
        record: &SpecRecord,
        run_dir: &Path,
    ) -> Result<InversionRun, PipelineError> {
        let mut agent = self.config.degradation_agent.instantiate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let options =
            InversionOptions { limits: self.config.generation.limits(), artifact_dir: Some(run_dir.to_path_buf()) };
        let degraded = run_inversion(gold, &record.spec, agent.as_mut(), self.backend.as_ref(), &options)?;
        let run = verify_and_classify(gold, &degraded, self.backend.as_ref())?;
        write_json(&run_dir.join(SPEC_FILE), record)?;
        write_json(&run_dir.join(RUN_FILE), &run)?;
        Ok(run)
    }

    /// Writes the issue for an accepted run and assembles its instances.
    pub fn instances_for(&self, run: &InversionRun, record: &SpecRecord) -> Result<Vec<TaskInstance>, PipelineError> {
        let symptoms: Vec<TestId> = run.classification.fail_to_pass.iter().cloned().collect();
        let (level, prompt) = build_issue_prompt(
            &run.record.spec,
            &symptoms,
            self.config.generation.guidance,
            derive_seed(record.seed, &["guidance"]),
        )?;
        let issue = IssueStatement::from_llm_output(&self.ask(&prompt)?, level)?;
        let provenance = Provenance {
            seed: Some(record.seed),
            prompts_sha256: Some(sha256_hex(
                format!("{}\n{}", record.prompts_sha256, sha256_hex(prompt.as_bytes())).as_bytes(),
            )),
        };
        Ok(assemble_instance(run, &issue, &provenance)?)
    }

    /// The whole flow for the given golds: specs, inversions in parallel, bundles.
    pub fn generate(
        &self,
        golds: &[GoldInstance],
        out_dir: &Path,
        work_dir: &Path,
    ) -> Result<GenerationSummary, PipelineError> {
        let pool = MemoryPool::from_dataset_root(out_dir).map_err(|e| file_err(out_dir, e))?;
        let tokens_before = self.tokens_used();
        let (specs, spec_failures) = self.generate_specs(golds, &pool, self.config.generation.tasks_per_gold);
        let by_repo: BTreeMap<&str, &GoldInstance> = golds.iter().map(|g| (g.repo_name.as_str(), g)).collect();

        let workers = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.jobs())
            .build()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let runs: Vec<(usize, Result<InversionRun, PipelineError>)> = workers.install(|| {
            specs
                .par_iter()
                .enumerate()
                .map(|(i, rec)| {
                    let gold = by_repo[rec.repo.as_str()];
                    let dir = work_dir.join("runs").join(&rec.repo).join(format!("{:04}", rec.index));
                    (i, self.invert(gold, rec, &dir))
                })
                .collect()
        });

        let mut summary =
            GenerationSummary { specs: specs.len(), spec_failures: spec_failures.len(), ..Default::default() };
        let mut seen = BTreeSet::new();
        for (i, result) in runs {
            summary.runs += 1;
            let run = match result {
                Ok(r) => r,
                Err(e) => {
                    tracing::warn!(task = %specs[i].spec.task_name, error = %e, "inversion run failed");
                    *summary.run_failures.entry(error_kind(&e)).or_default() += 1;
                    continue;
                }
            };
            if let RunVerdict::Discarded { reason } = &run.verdict {
                let key =
                    serde_json::to_value(reason).expect("reason serializes").as_str().unwrap_or("other").to_string();
                *summary.discarded.entry(key).or_default() += 1;
                continue;
            }
            summary.accepted += 1;
            let instances = match self.instances_for(&run, &specs[i]) {
                Ok(x) => x,
                Err(e) => {
                    tracing::warn!(task = %specs[i].spec.task_name, error = %e, "issue generation failed");
                    *summary.run_failures.entry(error_kind(&e)).or_default() += 1;
                    continue;
                }
            };
            for instance in instances {
                if !seen.insert(instance.instance_id.clone()) || out_dir.join(&instance.instance_id).exists() {
                    summary.duplicates += 1;
                    continue;
                }
                let bundle = emit_bundle(&instance, out_dir)?;
                summary.bundles.push(bundle.meta.instance_id);
            }
        }
        summary.tokens = self.tokens_used() - tokens_before;
        TokenLedger::add(out_dir, summary.tokens).map_err(|e| file_err(out_dir, e))?;
        Ok(summary)
    }
}

/// Collects one solver trajectory per bundle, in parallel, and saves each.
pub fn collect_all(
    config: &PipelineConfig,
    backend: &dyn SandboxBackend,
    instances: &[TaskInstance],
    out_dir: &Path,
) -> Result<Vec<Trajectory>, PipelineError> {
    let workers = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs())
        .build()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let limits = config.collect.limits();
    let results: Vec<Result<Trajectory, PipelineError>> = workers.install(|| {
        instances
            .par_iter()
            .map(|x| {
                let mut agent = config.solver_agent.instantiate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
                let t = collect_trajectory(x, agent.as_mut(), backend, &limits)?;
                save_trajectory(&t, out_dir)?;
                Ok(t)
            })
            .collect()
    });
    results.into_iter().collect()
}
