use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use super::{ChatProvider, ChatRequest, LlmError, ProviderConfig};

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(LlmError),
}

/// Blocking client for a chat-completions endpoint.
pub struct HttpProvider {
    config: ProviderConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    sleeper: Sleeper,
    tokens: AtomicU64,
}

impl std::fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpProvider").field("endpoint", &self.config.endpoint).finish_non_exhaustive()
    }
}

impl HttpProvider {
    /// Resolves the credential variable now so a missing key fails early.
    pub fn new(config: ProviderConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| LlmError::MissingCredential(var.clone()))?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, api_key, agent, sleeper: Arc::new(std::thread::sleep), tokens: AtomicU64::new(0) })
    }

    /// Replaces the backoff sleep, e.g. to record delays in tests.
    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let mut req = self.agent.post(&self.config.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(format!("reading body: {e}")),
        };
        match status {
            200..=299 => match self.extract(&text) {
                Ok(content) => Attempt::Done(content),
                Err(e) => Attempt::Fatal(e),
            },
            401 | 403 => Attempt::Fatal(LlmError::AuthRejected(status)),
            408 | 429 | 500..=599 => Attempt::Retry(format!("HTTP {status}")),
            _ => Attempt::Fatal(LlmError::Status { status, body: text.chars().take(500).collect() }),
        }
    }

    fn extract(&self, text: &str) -> Result<String, LlmError> {
        let v: Value = serde_json::from_str(text).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
        let content = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| LlmError::MalformedResponse("missing choices[0].message.content".into()))?;
        if let Some(n) = v.pointer("/usage/total_tokens").and_then(Value::as_u64) {
            self.tokens.fetch_add(n, Ordering::Relaxed);
        }
        Ok(content.to_string())
    }
}

impl ChatProvider for HttpProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        request.validate()?;
        let body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let max = self.config.retry.max_attempts;
        let mut last = String::new();
        for attempt in 1..=max {
            match self.attempt(&body) {
                Attempt::Done(content) => return Ok(content),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(detail) => {
                    tracing::warn!(attempt, %detail, "transient provider failure");
                    last = detail;
                    if attempt < max {
                        (self.sleeper)(self.config.retry.backoff(attempt));
                    }
                }
            }
        }
        Err(LlmError::Transport { attempts: max, detail: last })
    }

    fn tokens_used(&self) -> u64 {
        self.tokens.load(Ordering::Relaxed)
    }
}
