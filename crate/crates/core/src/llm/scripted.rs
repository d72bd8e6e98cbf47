//! Offline backends: a lookup table of registered responses and a closure backend.
//!
//! Script files are JSON lists of `{ "key": ScriptKey, "response": string | json }`.
//! A non-string response is stored as its compact JSON serialization.

use std::fs;
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use super::{Completion, CompletionRequest, LlmBackend, LlmError, Purpose};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptKey {
    /// Matches `CompletionRequest::fixture_key` exactly.
    Fixture(String),
    /// Matches `CompletionRequest::prompt_hash()` exactly.
    PromptHash(String),
    /// Matches requests of `purpose` whose prompt contains every string in `contains`.
    Rule {
        purpose: Purpose,
        #[serde(default)]
        contains: Vec<String>,
    },
}

impl ScriptKey {
    fn describe(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub key: ScriptKey,
    pub response: serde_json::Value,
}

impl ScriptEntry {
    fn response_text(&self) -> String {
        match &self.response {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }
}

/// Pure lookup backend. Lookup order: fixture key, prompt hash, then rules in
/// registration order. A miss is an error, never a default.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    entries: RwLock<Vec<(ScriptKey, String)>>,
    context_limit: Option<usize>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_context_limit(mut self, limit: usize) -> Self {
        self.context_limit = Some(limit);
        self
    }

    pub fn register_script(&self, key: ScriptKey, response: impl Into<String>) -> Result<(), LlmError> {
        let mut entries = self.entries.write().unwrap();
        if entries.iter().any(|(k, _)| k == &key) {
            return Err(LlmError::DuplicateScript(key.describe()));
        }
        entries.push((key, response.into()));
        Ok(())
    }

    pub fn register_entries(&self, entries: &[ScriptEntry]) -> Result<(), LlmError> {
        for e in entries {
            self.register_script(e.key.clone(), e.response_text())?;
        }
        Ok(())
    }

    pub fn load_file(&self, path: &Path) -> Result<(), LlmError> {
        let bytes = fs::read(path).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        let entries: Vec<ScriptEntry> =
            serde_json::from_slice(&bytes).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        self.register_entries(&entries)
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lookup(&self, req: &CompletionRequest) -> Option<String> {
        let entries = self.entries.read().unwrap();
        if let Some(fk) = &req.fixture_key {
            if let Some((_, r)) = entries.iter().find(|(k, _)| matches!(k, ScriptKey::Fixture(f) if f == fk)) {
                return Some(r.clone());
            }
        }
        let hash = req.prompt_hash();
        if let Some((_, r)) = entries.iter().find(|(k, _)| matches!(k, ScriptKey::PromptHash(h) if *h == hash)) {
            return Some(r.clone());
        }
        let prompt = req.prompt_text();
        entries
            .iter()
            .find(|(k, _)| match k {
                ScriptKey::Rule { purpose, contains } => {
                    *purpose == req.purpose && contains.iter().all(|c| prompt.contains(c.as_str()))
                }
                _ => false,
            })
            .map(|(_, r)| r.clone())
    }
}

impl LlmBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn context_limit(&self) -> Option<usize> {
        self.context_limit
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, LlmError> {
        match self.lookup(req) {
            Some(text) => Ok(Completion::estimated(req, text)),
            None => Err(LlmError::Unscripted { purpose: req.purpose, prompt_hash: req.prompt_hash() }),
        }
    }
}

/// Backend defined by a closure over the request. Used for fixtures whose
/// responses are a function of the prompt (e.g. a per-chunk judge).
pub struct FnBackend<F> {
    name: String,
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<String, LlmError> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f }
    }
}

impl<F> LlmBackend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<String, LlmError> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, LlmError> {
        (self.f)(req).map(|text| Completion::estimated(req, text))
    }
}
