//! Chat-completion access: an HTTP provider speaking the common
//! `messages`-in/`choices`-out JSON shape, and a scripted mock for offline runs.

mod http;
mod mock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpProvider;
pub use mock::{MockProvider, MockRule, MockScript, ReplySelection};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LlmError {
    #[error("transport failure after {attempts} attempt(s): {detail}")]
    Transport { attempts: u32, detail: String },
    #[error("provider rejected credentials (HTTP {0})")]
    AuthRejected(u16),
    #[error("provider returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid provider config: {0}")]
    InvalidConfig(String),
    #[error("credential variable {0} is not set")]
    MissingCredential(String),
    #[error("mock script has no reply left for this request")]
    ScriptExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model: String,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self { messages, temperature: 0.7, max_tokens: 4096, model: model.into() }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("no messages".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest(format!("temperature {} < 0", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 5, backoff_base_ms: 500 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): `base * 2^(retry-1)`.
    pub fn backoff(&self, retry: u32) -> std::time::Duration {
        let factor = 1u64 << (retry.saturating_sub(1)).min(16);
        std::time::Duration::from_millis(self.backoff_base_ms.saturating_mul(factor))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    pub timeout_secs: f64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.retry.max_attempts < 1 {
            return Err(LlmError::InvalidConfig("max_attempts must be at least 1".into()));
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(LlmError::InvalidConfig("timeout must be positive".into()));
        }
        if self.endpoint.trim().is_empty() {
            return Err(LlmError::InvalidConfig("empty endpoint".into()));
        }
        Ok(())
    }
}

pub trait ChatProvider: Send + Sync {
    /// Returns the assistant message content.
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError>;

    /// Tokens consumed so far, as reported by the provider or estimated.
    fn tokens_used(&self) -> u64;
}

/// Validates the request and forwards it to `provider`.
pub fn complete(request: &ChatRequest, provider: &dyn ChatProvider) -> Result<String, LlmError> {
    request.validate()?;
    provider.complete(request)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation() {
        assert!(ChatRequest::new("m", vec![]).validate().is_err());
        let mut r = ChatRequest::new("m", vec![ChatMessage::user("hi")]);
        assert!(r.validate().is_ok());
        r.temperature = -0.1;
        assert!(r.validate().is_err());
        r.temperature = f64::NAN;
        assert!(r.validate().is_err());
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy { max_attempts: 3, backoff_base_ms: 100 };
        assert_eq!(p.backoff(1).as_millis(), 100);
        assert_eq!(p.backoff(2).as_millis(), 200);
        assert_eq!(p.backoff(3).as_millis(), 400);
    }

    #[test]
    fn config_validation() {
        let mut c = ProviderConfig {
            endpoint: "http://x".into(),
            api_key_env: None,
            timeout_secs: 1.0,
            retry: RetryPolicy { max_attempts: 0, backoff_base_ms: 1 },
        };
        assert!(c.validate().is_err());
        c.retry.max_attempts = 1;
        assert!(c.validate().is_ok());
        c.timeout_secs = 0.0;
        assert!(c.validate().is_err());
    }
}
