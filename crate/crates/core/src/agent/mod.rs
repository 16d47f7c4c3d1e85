//! Agent adapters and the observation/action loop that drives them inside a sandbox.

mod follow;
mod process;
mod scripted;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::sandbox::{SandboxBackend, SandboxError, SandboxHandle};

pub use follow::InstructionFollowingAgent;
pub use process::ProcessAgent;
pub use scripted::ScriptedAgent;

/// Longest command output kept in an observation step.
pub const OBSERVATION_LIMIT: usize = 8_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AgentError {
    #[error("agent crashed: {0}")]
    Crashed(String),
    #[error("agent protocol violation: {0}")]
    Protocol(String),
    #[error("agent config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSource {
    Agent,
    Environment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionCall {
    /// JSON-encoded argument object.
    pub arguments: String,
    pub name: String,
}

/// One trajectory entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub id: u64,
    pub source: StepSource,
    pub message: String,
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function: Option<FunctionCall>,
}

impl Step {
    /// Shell command carried by an `execute_bash` call.
    pub fn command(&self) -> Option<String> {
        self.argument("execute_bash", "command")
    }

    /// Path viewed through the file tool.
    pub fn viewed_path(&self) -> Option<String> {
        let f = self.function.as_ref()?;
        if f.name != "str_replace_editor" {
            return None;
        }
        let v: serde_json::Value = serde_json::from_str(&f.arguments).ok()?;
        (v.get("command")?.as_str()? == "view").then(|| v.get("path")?.as_str().map(str::to_string))?
    }

    fn argument(&self, function: &str, key: &str) -> Option<String> {
        let f = self.function.as_ref().filter(|f| f.name == function)?;
        let v: serde_json::Value = serde_json::from_str(&f.arguments).ok()?;
        v.get(key)?.as_str().map(str::to_string)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AgentAction {
    Run {
        command: String,
    },
    WriteFile {
        path: String,
        content: String,
    },
    ReadFile {
        path: String,
    },
    Think {
        thought: String,
    },
    /// Ends the loop; the counterpart of a framework's final-thought signal.
    Finish {
        message: String,
    },
}

impl AgentAction {
    pub fn is_finish(&self) -> bool {
        matches!(self, AgentAction::Finish { .. })
    }

    fn action_name(&self) -> &'static str {
        match self {
            AgentAction::Run { .. } => "run",
            AgentAction::WriteFile { .. } => "edit",
            AgentAction::ReadFile { .. } => "read",
            AgentAction::Think { .. } => "think",
            AgentAction::Finish { .. } => "finish",
        }
    }

    fn function(&self) -> FunctionCall {
        let (name, args) = match self {
            AgentAction::Run { command } => ("execute_bash", json!({ "command": command })),
            AgentAction::WriteFile { path, content } => {
                ("str_replace_editor", json!({ "command": "create", "path": path, "file_text": content }))
            }
            AgentAction::ReadFile { path } => ("str_replace_editor", json!({ "command": "view", "path": path })),
            AgentAction::Think { thought } => ("think", json!({ "thought": thought })),
            AgentAction::Finish { message } => ("finish", json!({ "message": message })),
        };
        FunctionCall { arguments: args.to_string(), name: name.to_string() }
    }

    /// The agent-source step recording this action.
    pub fn step(&self, id: u64, message: impl Into<String>) -> Step {
        Step {
            id,
            source: StepSource::Agent,
            message: message.into(),
            action: self.action_name().to_string(),
            function: Some(self.function()),
        }
    }

    /// Inverse of the step encoding, for agents speaking the step shape.
    pub fn from_step_shape(action: &str, function: Option<&FunctionCall>, message: &str) -> Result<Self, AgentError> {
        let args: serde_json::Value = match function {
            Some(f) => serde_json::from_str(&f.arguments)
                .map_err(|e| AgentError::Protocol(format!("function arguments are not JSON: {e}")))?,
            None => json!({}),
        };
        let field = |k: &str| args.get(k).and_then(|v| v.as_str()).map(str::to_string);
        let need = |k: &str| field(k).ok_or_else(|| AgentError::Protocol(format!("{action} needs argument {k:?}")));
        match action {
            "run" => Ok(AgentAction::Run { command: need("command")? }),
            "edit" | "write" => Ok(AgentAction::WriteFile { path: need("path")?, content: need("file_text")? }),
            "read" => Ok(AgentAction::ReadFile { path: need("path")? }),
            "think" => Ok(AgentAction::Think { thought: field("thought").unwrap_or_else(|| message.to_string()) }),
            "finish" => Ok(AgentAction::Finish { message: field("message").unwrap_or_else(|| message.to_string()) }),
            other => Err(AgentError::Protocol(format!("unknown action {other:?}"))),
        }
    }
}

/// What the agent sees before choosing its next action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Observation {
    Task { instruction: String },
    CommandOutput { exit_code: i32, output: String, timed_out: bool },
    FileContent { path: String, content: Option<String> },
    FileWritten { path: String },
    Error { message: String },
    Ack,
}

pub trait AgentAdapter: Send {
    fn id(&self) -> &str;
    fn next_action(&mut self, observation: &Observation) -> Result<AgentAction, AgentError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveLimits {
    /// Seconds for the whole loop.
    pub budget: f64,
    /// Seconds per command, further capped by what is left of the budget.
    pub command_timeout: f64,
    pub max_steps: usize,
}

impl Default for DriveLimits {
    fn default() -> Self {
        Self { budget: 900.0, command_timeout: 300.0, max_steps: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveOutcome {
    pub steps: Vec<Step>,
    pub finished: bool,
    pub budget_exhausted: bool,
    /// Set when the agent failed mid-loop.
    pub crashed: Option<String>,
    /// Agent actions taken, the finish action included.
    pub agent_actions: usize,
    /// Seconds: the larger of wall-clock time and summed command durations.
    pub elapsed: f64,
}

fn clip(text: &str) -> String {
    if text.len() <= OBSERVATION_LIMIT {
        return text.to_string();
    }
    let mut cut = OBSERVATION_LIMIT;
    while !text.is_char_boundary(cut) {
        cut -= 1;
    }
    format!("{}\n[... output truncated ...]", &text[..cut])
}

/// Runs the observation/action loop until the agent finishes, crashes, or
/// the budget runs out. Sandbox failures abort the loop with an error.
pub fn drive(
    agent: &mut dyn AgentAdapter,
    backend: &dyn SandboxBackend,
    handle: &SandboxHandle,
    instruction: &str,
    limits: &DriveLimits,
) -> Result<DriveOutcome, SandboxError> {
    let start = Instant::now();
    let mut command_time = 0.0f64;
    let mut out = DriveOutcome {
        steps: Vec::new(),
        finished: false,
        budget_exhausted: false,
        crashed: None,
        agent_actions: 0,
        elapsed: 0.0,
    };
    let push = |steps: &mut Vec<Step>, source, message: String, action: &str, function| {
        let id = steps.len() as u64 + 1;
        steps.push(Step { id, source, message, action: action.to_string(), function });
    };
    let mut observation = Observation::Task { instruction: instruction.to_string() };

    loop {
        let elapsed = start.elapsed().as_secs_f64().max(command_time);
        if limits.budget - elapsed < 1e-3 || out.agent_actions >= limits.max_steps {
            out.budget_exhausted = true;
            break;
        }
        let action = match agent.next_action(&observation) {
            Ok(a) => a,
            Err(e) => {
                tracing::warn!(agent = agent.id(), error = %e, "agent stopped abnormally");
                out.crashed = Some(e.to_string());
                break;
            }
        };
        out.agent_actions += 1;
        let name = action.action_name();
        let function = Some(action.function());
        match &action {
            AgentAction::Run { command } => {
                let remaining = (limits.budget - elapsed).max(0.0);
                let timeout = Duration::from_secs_f64(limits.command_timeout.min(remaining).max(0.001));
                let r = backend.exec_command(handle, command, timeout)?;
                command_time += r.duration;
                let message = if r.timed_out {
                    format!("Command `{command}` timed out.")
                } else {
                    format!("Command `{command}` executed with exit code {}.", r.exit_code)
                };
                push(&mut out.steps, StepSource::Agent, message, name, function);
                let output = clip(&format!("{}{}", r.stdout, r.stderr));
                push(&mut out.steps, StepSource::Environment, output.clone(), name, None);
                observation = Observation::CommandOutput { exit_code: r.exit_code, output, timed_out: r.timed_out };
            }
            AgentAction::WriteFile { path, content } => {
                push(&mut out.steps, StepSource::Agent, format!("Writing {path}"), name, function);
                observation = match backend.write_file(handle, path, content) {
                    Ok(()) => Observation::FileWritten { path: path.clone() },
                    Err(SandboxError::SessionDead(s)) => return Err(SandboxError::SessionDead(s)),
                    Err(e) => Observation::Error { message: e.to_string() },
                };
                let msg = match &observation {
                    Observation::Error { message } => message.clone(),
                    _ => format!("File created successfully at: {path}"),
                };
                push(&mut out.steps, StepSource::Environment, msg, name, None);
            }
            AgentAction::ReadFile { path } => {
                push(&mut out.steps, StepSource::Agent, format!("Reading {path}"), name, function);
                let content = backend.read_file(handle, path)?;
                let msg = clip(content.as_deref().unwrap_or("file not found"));
                push(&mut out.steps, StepSource::Environment, msg, name, None);
                observation = Observation::FileContent { path: path.clone(), content };
            }
            AgentAction::Think { thought } => {
                push(&mut out.steps, StepSource::Agent, thought.clone(), name, function);
                observation = Observation::Ack;
            }
            AgentAction::Finish { message } => {
                push(&mut out.steps, StepSource::Agent, message.clone(), name, function);
                out.finished = true;
                break;
            }
        }
    }
    out.elapsed = start.elapsed().as_secs_f64().max(command_time);
    Ok(out)
}

/// Which adapter to instantiate for each run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentSpec {
    /// Runs the backtick-quoted commands found in its instruction.
    InstructionFollowing {
        #[serde(default)]
        warmup: Vec<String>,
    },
    /// Replays a JSON list of actions.
    Scripted { script: PathBuf },
    /// External program speaking JSON lines on stdin/stdout.
    Process {
        program: String,
        #[serde(default)]
        args: Vec<String>,
        #[serde(default = "default_response_timeout")]
        response_timeout_secs: f64,
    },
}

fn default_response_timeout() -> f64 {
    600.0
}

impl Default for AgentSpec {
    fn default() -> Self {
        AgentSpec::InstructionFollowing { warmup: Vec::new() }
    }
}

impl AgentSpec {
    pub fn instantiate(&self) -> Result<Box<dyn AgentAdapter>, AgentError> {
        Ok(match self {
            AgentSpec::InstructionFollowing { warmup } => {
                Box::new(InstructionFollowingAgent::new().with_warmup(warmup.clone()))
            }
            AgentSpec::Scripted { script } => Box::new(ScriptedAgent::load(script)?),
            AgentSpec::Process { program, args, response_timeout_secs } => {
                Box::new(ProcessAgent::spawn(program, args, Duration::from_secs_f64(*response_timeout_secs))?)
            }
        })
    }
}
