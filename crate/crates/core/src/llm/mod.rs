//! Completion interface over remote chat models and scripted fixtures, with
//! per-purpose budget accounting.

mod http;
mod ledger;
mod scripted;

use std::fmt;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::{HttpBackend, HttpBackendConfig};
pub use ledger::{BudgetCeilings, BudgetLedger, LedgerSnapshot, PurposeUsage};
pub use scripted::{FnBackend, ScriptEntry, ScriptKey, ScriptedBackend};

use crate::tokenize::count_tokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Parse,
    Classify,
    Clarify,
    Rewrite,
    Plan,
    Judge,
    Probe,
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Purpose::Parse => "parse",
            Purpose::Classify => "classify",
            Purpose::Clarify => "clarify",
            Purpose::Rewrite => "rewrite",
            Purpose::Plan => "plan",
            Purpose::Judge => "judge",
            Purpose::Probe => "probe",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub purpose: Purpose,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Stable caller-derived key used by scripted fixtures (e.g. a judge batch hash).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture_key: Option<String>,
}

impl CompletionRequest {
    pub fn new(purpose: Purpose, messages: Vec<Message>) -> Self {
        Self { purpose, messages, temperature: 0.0, max_output_tokens: 1024, fixture_key: None }
    }

    pub fn with_fixture_key(mut self, key: impl Into<String>) -> Self {
        self.fixture_key = Some(key.into());
        self
    }

    pub fn prompt_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }

    /// Whitespace-token estimate of the prompt size.
    pub fn prompt_tokens(&self) -> u64 {
        self.messages.iter().map(|m| count_tokens(&m.content) as u64).sum()
    }

    /// SHA-256 over purpose, roles, and contents.
    pub fn prompt_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.purpose.to_string().as_bytes());
        for m in &self.messages {
            h.update(b"\n");
            h.update(serde_json::to_string(&m.role).unwrap_or_default().as_bytes());
            h.update(b"\n");
            h.update(m.content.as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("messages must be non-empty".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::InvalidRequest(format!("temperature {} < 0", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

impl Completion {
    /// Completion whose usage is estimated with the whitespace tokenizer.
    pub fn estimated(req: &CompletionRequest, text: String) -> Self {
        let usage = Usage { prompt_tokens: req.prompt_tokens(), output_tokens: count_tokens(&text) as u64 };
        Self { text, usage }
    }
}

#[derive(Debug, Clone, Error)]
pub enum LlmError {
    #[error("unscripted prompt (purpose {purpose}, hash {prompt_hash})")]
    Unscripted { purpose: Purpose, prompt_hash: String },
    #[error("duplicate script key {0}")]
    DuplicateScript(String),
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("transport error after {attempts} attempt(s): {cause}")]
    Transport { attempts: u32, cause: String },
    /// Backend-level failure that may succeed on retry.
    #[error("retryable backend failure: {0}")]
    Retryable(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("configuration: {0}")]
    Config(String),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, LlmError::Retryable(_))
    }
}

pub trait LlmBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Maximum prompt size in tokens, when known.
    fn context_limit(&self) -> Option<usize> {
        None
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, LlmError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 4, base_delay_ms: 250, max_delay_ms: 8_000 }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { max_attempts: 1, base_delay_ms: 0, max_delay_ms: 0 }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1u64 << attempt.min(20)).min(self.max_delay_ms);
        Duration::from_millis(ms)
    }
}

/// Backend plus ledger and retry policy. Cheap to clone; clones share the ledger.
#[derive(Clone)]
pub struct LlmClient {
    backend: Arc<dyn LlmBackend>,
    ledger: Arc<BudgetLedger>,
    retry: RetryPolicy,
    max_parallel: usize,
}

impl fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmClient").field("backend", &self.backend.name()).field("retry", &self.retry).finish()
    }
}

impl LlmClient {
    pub fn new(backend: Arc<dyn LlmBackend>) -> Self {
        Self {
            backend,
            ledger: Arc::new(BudgetLedger::new(BudgetCeilings::default())),
            retry: RetryPolicy::default(),
            max_parallel: 4,
        }
    }

    pub fn with_ceilings(mut self, ceilings: BudgetCeilings) -> Self {
        self.ledger = Arc::new(BudgetLedger::new(ceilings));
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_parallel(mut self, n: usize) -> Self {
        self.max_parallel = n.max(1);
        self
    }

    pub fn backend(&self) -> &dyn LlmBackend {
        self.backend.as_ref()
    }

    pub fn ledger(&self) -> &BudgetLedger {
        &self.ledger
    }

    pub fn max_parallel(&self) -> usize {
        self.max_parallel
    }

    pub fn context_limit(&self) -> Option<usize> {
        self.backend.context_limit()
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<Completion, LlmError> {
        req.validate()?;
        self.ledger.check()?;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.backend.complete(req) {
                Ok(c) => {
                    self.ledger.record(req.purpose, c.usage);
                    return Ok(c);
                }
                Err(e) if e.is_retryable() => {
                    if attempt >= self.retry.max_attempts {
                        return Err(LlmError::Transport { attempts: attempt, cause: e.to_string() });
                    }
                    log::warn!("{} call failed (attempt {attempt}): {e}", req.purpose);
                    thread::sleep(self.retry.delay(attempt - 1));
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Parse a JSON value from model output, tolerating code fences and
/// surrounding prose around a single top-level object.
pub fn parse_json_response<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, String> {
    let trimmed = text.trim();
    if let Ok(v) = serde_json::from_str(trimmed) {
        return Ok(v);
    }
    let (Some(start), Some(end)) = (trimmed.find('{'), trimmed.rfind('}')) else {
        return Err("no JSON object in response".into());
    };
    if end < start {
        return Err("no JSON object in response".into());
    }
    serde_json::from_str(&trimmed[start..=end]).map_err(|e| e.to_string())
}
