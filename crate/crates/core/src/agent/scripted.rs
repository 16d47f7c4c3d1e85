use std::path::Path;

use super::{AgentAction, AgentAdapter, AgentError, Observation};

/// Replays a fixed list of actions, ignoring observations.
#[derive(Debug, Clone)]
pub struct ScriptedAgent {
    actions: Vec<AgentAction>,
    next: usize,
    repeat_last: bool,
}

impl ScriptedAgent {
    pub fn new(actions: Vec<AgentAction>) -> Self {
        Self { actions, next: 0, repeat_last: false }
    }

    /// Loads a JSON array of actions, e.g. `[{"type": "run", "command": "ls"}]`.
    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path).map_err(|e| AgentError::Config(format!("{}: {e}", path.display())))?;
        let actions =
            serde_json::from_str(&text).map_err(|e| AgentError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self::new(actions))
    }

    /// Keep issuing the final action forever instead of crashing when the script ends.
    pub fn repeat_last(mut self) -> Self {
        self.repeat_last = true;
        self
    }
}

impl AgentAdapter for ScriptedAgent {
    fn id(&self) -> &str {
        "scripted"
    }

    fn next_action(&mut self, _observation: &Observation) -> Result<AgentAction, AgentError> {
        let action = match self.actions.get(self.next) {
            Some(a) => a.clone(),
            None if self.repeat_last && !self.actions.is_empty() => self.actions[self.actions.len() - 1].clone(),
            None => return Err(AgentError::Crashed("script exhausted without finishing".into())),
        };
        self.next += 1;
        Ok(action)
    }
}
