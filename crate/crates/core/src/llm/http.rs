//! Chat-completions-style JSON over HTTP.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Completion, CompletionRequest, LlmBackend, LlmError, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Base URL; `/chat/completions` is appended.
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default)]
    pub context_limit: Option<usize>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self { config, client })
    }

    fn body(&self, req: &CompletionRequest) -> serde_json::Value {
        serde_json::json!({
            "model": self.config.model,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        })
    }
}

impl LlmBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn context_limit(&self) -> Option<usize> {
        self.config.context_limit
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, LlmError> {
        let url = format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'));
        let mut http = self.client.post(url).json(&self.body(req));
        if let Some(key) = &self.config.api_key {
            http = http.bearer_auth(key);
        }
        let resp = http.send().map_err(|e| LlmError::Retryable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            let msg = format!("HTTP {status}: {body}");
            return Err(if status.is_server_error() || status.as_u16() == 429 {
                LlmError::Retryable(msg)
            } else {
                LlmError::Backend(msg)
            });
        }
        let parsed: ChatResponse = resp.json().map_err(|e| LlmError::Backend(format!("malformed response: {e}")))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Backend("response has no choices".into()))?;
        let mut completion = Completion::estimated(req, text);
        if let Some(u) = parsed.usage {
            completion.usage = Usage { prompt_tokens: u.prompt_tokens, output_tokens: u.completion_tokens };
        }
        Ok(completion)
    }
}
