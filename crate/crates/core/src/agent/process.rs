use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Deserialize;

use super::{AgentAction, AgentAdapter, AgentError, FunctionCall, Observation};

const STDERR_TAIL: usize = 4_000;

#[derive(Deserialize)]
struct Reply {
    action: String,
    #[serde(default)]
    message: String,
    #[serde(default)]
    function: Option<FunctionCall>,
}

/// External agent process. Each observation goes to its stdin as one JSON
/// line; it answers with one JSON line in the step shape
/// (`{"action": "run", "function": {"name": ..., "arguments": ...}}`).
pub struct ProcessAgent {
    id: String,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    stderr: Arc<Mutex<String>>,
    response_timeout: Duration,
}

impl std::fmt::Debug for ProcessAgent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProcessAgent").field("id", &self.id).finish_non_exhaustive()
    }
}

impl ProcessAgent {
    pub fn spawn(program: &str, args: &[String], response_timeout: Duration) -> Result<Self, AgentError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| AgentError::Config(format!("cannot start {program}: {e}")))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let mut stderr_pipe = child.stderr.take().expect("piped stderr");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let stderr = Arc::new(Mutex::new(String::new()));
        let sink = stderr.clone();
        std::thread::spawn(move || {
            let mut buf = [0u8; 1024];
            while let Ok(n) = stderr_pipe.read(&mut buf) {
                if n == 0 {
                    break;
                }
                let mut s = sink.lock().expect("stderr sink");
                s.push_str(&String::from_utf8_lossy(&buf[..n]));
                if s.len() > STDERR_TAIL * 2 {
                    let mut cut = s.len() - STDERR_TAIL;
                    while !s.is_char_boundary(cut) {
                        cut += 1;
                    }
                    *s = s[cut..].to_string();
                }
            }
        });
        let stdin = child.stdin.take();
        Ok(Self { id: program.to_string(), child, stdin, lines: rx, stderr, response_timeout })
    }

    fn crash(&self, what: &str) -> AgentError {
        let tail = self.stderr.lock().map(|s| s.clone()).unwrap_or_default();
        AgentError::Crashed(format!("{what}\n{tail}").trim_end().to_string())
    }
}

impl AgentAdapter for ProcessAgent {
    fn id(&self) -> &str {
        &self.id
    }

    fn next_action(&mut self, observation: &Observation) -> Result<AgentAction, AgentError> {
        let line = serde_json::to_string(observation).expect("observation serializes");
        let sent = match self.stdin.as_mut() {
            Some(stdin) => writeln!(stdin, "{line}").and_then(|_| stdin.flush()).is_ok(),
            None => false,
        };
        if !sent {
            return Err(self.crash("agent closed its input"));
        }
        loop {
            let reply = match self.lines.recv_timeout(self.response_timeout) {
                Ok(Ok(reply)) => reply,
                Ok(Err(e)) => return Err(self.crash(&format!("reading agent output: {e}"))),
                Err(RecvTimeoutError::Timeout) => return Err(self.crash("agent did not answer in time")),
                Err(RecvTimeoutError::Disconnected) => return Err(self.crash("agent exited")),
            };
            if reply.trim().is_empty() {
                continue;
            }
            let reply: Reply =
                serde_json::from_str(&reply).map_err(|e| AgentError::Protocol(format!("bad reply {reply:?}: {e}")))?;
            return AgentAction::from_step_shape(&reply.action, reply.function.as_ref(), &reply.message);
        }
    }
}

impl Drop for ProcessAgent {
    fn drop(&mut self) {
        self.stdin.take();
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
