use std::collections::VecDeque;
use std::sync::LazyLock;

use regex::Regex;

use super::{AgentAction, AgentAdapter, AgentError, Observation};

static INLINE_CODE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?:^|[^`])`([^`\n]+)`(?:[^`]|$)").unwrap());

/// Where the degradation instruction asks for the summarized build file.
const SUMMARY_PATH: &str = "/logs/Dockerfile";

// Commands that only inspect; never worth replaying.
const READ_ONLY: &[&str] = &["cat", "ls", "pytest", "true", "cd", "echo"];

/// Deterministic stand-in agent: runs optional warm-up commands, then every
/// inline-code command in its instruction, writes the successful mutating
/// ones to `/logs/Dockerfile` as `RUN` lines when the instruction asks for
/// that file, and finishes.
#[derive(Debug, Clone, Default)]
pub struct InstructionFollowingAgent {
    warmup: Vec<String>,
    queue: VecDeque<(String, bool)>,
    pending: Option<(String, bool)>,
    recorded: Vec<String>,
    wants_summary: bool,
    started: bool,
    summarized: bool,
}

/// Inline-code spans of `text`, in order, without duplicates.
pub(crate) fn inline_commands(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    // Overlapping-safe scan: each span ends at its closing backtick.
    let mut rest = text;
    while let Some(m) = INLINE_CODE.captures(rest) {
        let span = m.get(1).expect("group");
        let cmd = span.as_str().trim().to_string();
        if !cmd.is_empty() && !out.contains(&cmd) {
            out.push(cmd);
        }
        rest = &rest[span.end() + 1..];
    }
    out
}

impl InstructionFollowingAgent {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_warmup(mut self, warmup: Vec<String>) -> Self {
        self.warmup = warmup;
        self
    }

    fn mutating(cmd: &str) -> bool {
        let verb = cmd.split_whitespace().next().unwrap_or_default();
        !READ_ONLY.contains(&verb) || cmd.contains('>')
    }
}

impl AgentAdapter for InstructionFollowingAgent {
    fn id(&self) -> &str {
        "instruction-following"
    }

    fn next_action(&mut self, observation: &Observation) -> Result<AgentAction, AgentError> {
        match observation {
            Observation::Task { instruction } if !self.started => {
                self.started = true;
                self.wants_summary = instruction.contains(SUMMARY_PATH);
                self.queue.extend(self.warmup.iter().map(|c| (c.clone(), false)));
                self.queue.extend(inline_commands(instruction).into_iter().map(|c| (c, true)));
            }
            Observation::CommandOutput { exit_code, timed_out, .. } => {
                if let Some((cmd, record)) = self.pending.take() {
                    if record && *exit_code == 0 && !timed_out && Self::mutating(&cmd) {
                        self.recorded.push(cmd);
                    }
                }
            }
            _ => {}
        }
        if let Some((cmd, record)) = self.queue.pop_front() {
            self.pending = Some((cmd.clone(), record));
            return Ok(AgentAction::Run { command: cmd });
        }
        if self.wants_summary && !self.summarized {
            self.summarized = true;
            let content: String = self.recorded.iter().map(|c| format!("RUN {c}\n")).collect();
            return Ok(AgentAction::WriteFile { path: SUMMARY_PATH.into(), content });
        }
        Ok(AgentAction::Finish { message: format!("Done. Ran {} command(s).", self.recorded.len()) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_inline_code_only() {
        let text =
            "Use `corrupt_lib zlib` then `rm -f /x`.\n```\nblock\n```\nAnd `corrupt_lib zlib` again, `env_unset LANG`";
        assert_eq!(inline_commands(text), vec!["corrupt_lib zlib", "rm -f /x", "env_unset LANG"]);
    }

    #[test]
    fn records_successful_mutations_and_summarizes() {
        let mut a = InstructionFollowingAgent::new().with_warmup(vec!["ls /".into()]);
        let task = Observation::Task {
            instruction: "Do `corrupt_lib zlib` and `bogus` and `cat /etc/x`. Write /logs/Dockerfile.".into(),
        };
        let ok = |code| Observation::CommandOutput { exit_code: code, output: String::new(), timed_out: false };
        assert_eq!(a.next_action(&task).unwrap(), AgentAction::Run { command: "ls /".into() });
        assert_eq!(a.next_action(&ok(0)).unwrap(), AgentAction::Run { command: "corrupt_lib zlib".into() });
        assert_eq!(a.next_action(&ok(0)).unwrap(), AgentAction::Run { command: "bogus".into() });
        assert_eq!(a.next_action(&ok(127)).unwrap(), AgentAction::Run { command: "cat /etc/x".into() });
        assert_eq!(
            a.next_action(&ok(0)).unwrap(),
            AgentAction::WriteFile { path: "/logs/Dockerfile".into(), content: "RUN corrupt_lib zlib\n".into() }
        );
        assert!(a.next_action(&Observation::FileWritten { path: "/logs/Dockerfile".into() }).unwrap().is_finish());
    }
}
