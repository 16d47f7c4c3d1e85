use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatProvider, ChatRequest, LlmError};
use crate::util::{sha256_hex, word_count};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplySelection {
    /// Replies are handed out in order; running out is an error.
    #[default]
    Sequential,
    /// The reply is picked by hashing the prompt, so it does not depend on call order.
    Hash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    /// Substring the prompt must contain; `None` matches anything.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    pub replies: Vec<String>,
    #[serde(default)]
    pub select: ReplySelection,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScriptFile {
    Replies(Vec<String>),
    Rules { rules: Vec<MockRule> },
}

impl MockScript {
    /// One catch-all rule replying in order.
    pub fn sequential(replies: Vec<String>) -> Self {
        Self { rules: vec![MockRule { contains: None, replies, select: ReplySelection::Sequential }] }
    }

    /// Accepts either a JSON array of replies or `{"rules": [...]}`.
    pub fn parse(json: &str) -> Result<Self, LlmError> {
        let file: ScriptFile =
            serde_json::from_str(json).map_err(|e| LlmError::InvalidConfig(format!("mock script: {e}")))?;
        let script = match file {
            ScriptFile::Replies(r) => Self::sequential(r),
            ScriptFile::Rules { rules } => Self { rules },
        };
        if script.rules.iter().any(|r| r.replies.is_empty()) {
            return Err(LlmError::InvalidConfig("mock rule without replies".into()));
        }
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| LlmError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

/// Offline provider answering from a [`MockScript`].
#[derive(Debug)]
pub struct MockProvider {
    script: MockScript,
    cursors: Mutex<Vec<usize>>,
    tokens: AtomicU64,
}

impl MockProvider {
    pub fn new(script: MockScript) -> Self {
        let n = script.rules.len();
        Self { script, cursors: Mutex::new(vec![0; n]), tokens: AtomicU64::new(0) }
    }

    pub fn replies(replies: Vec<String>) -> Self {
        Self::new(MockScript::sequential(replies))
    }
}

impl ChatProvider for MockProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        request.validate()?;
        let prompt: String = request.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
        let (idx, rule) = self
            .script
            .rules
            .iter()
            .enumerate()
            .find(|(_, r)| r.contains.as_deref().map_or(true, |needle| prompt.contains(needle)))
            .ok_or(LlmError::ScriptExhausted)?;
        let reply = match rule.select {
            ReplySelection::Sequential => {
                let mut cursors = self.cursors.lock().expect("mock cursor lock");
                let reply = rule.replies.get(cursors[idx]).ok_or(LlmError::ScriptExhausted)?;
                cursors[idx] += 1;
                reply.clone()
            }
            ReplySelection::Hash => {
                let digest = sha256_hex(prompt.as_bytes());
                let n = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
                rule.replies[(n % rule.replies.len() as u64) as usize].clone()
            }
        };
        self.tokens.fetch_add((word_count(&prompt) + word_count(&reply)) as u64, Ordering::Relaxed);
        Ok(reply)
    }

    fn tokens_used(&self) -> u64 {
        self.tokens.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ChatMessage;

    fn ask(p: &MockProvider, text: &str) -> Result<String, LlmError> {
        p.complete(&ChatRequest::new("mock", vec![ChatMessage::user(text)]))
    }

    #[test]
    fn canned_reply_verbatim() {
        let p = MockProvider::replies(vec!["  exact\nreply  ".into()]);
        assert_eq!(ask(&p, "anything").unwrap(), "  exact\nreply  ");
        assert_eq!(ask(&p, "again"), Err(LlmError::ScriptExhausted));
        assert!(p.tokens_used() > 0);
    }

    #[test]
    fn rules_and_hash_selection() {
        let script = MockScript::parse(
            r#"{"rules": [
                {"contains": "Chaos", "replies": ["a", "b", "c"], "select": "hash"},
                {"replies": ["fallback"]}
            ]}"#,
        )
        .unwrap();
        let p = MockProvider::new(script);
        let first = ask(&p, "Chaos prompt 1").unwrap();
        assert_eq!(ask(&p, "Chaos prompt 1").unwrap(), first);
        assert_eq!(ask(&p, "other").unwrap(), "fallback");
    }

    #[test]
    fn array_script_and_bad_scripts() {
        let p = MockProvider::new(MockScript::parse(r#"["one", "two"]"#).unwrap());
        assert_eq!(ask(&p, "x").unwrap(), "one");
        assert_eq!(ask(&p, "x").unwrap(), "two");
        assert!(MockScript::parse("{").is_err());
        assert!(MockScript::parse(r#"{"rules": [{"replies": []}]}"#).is_err());
    }
}
