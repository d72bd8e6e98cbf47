//! End-to-end runs and run configuration files.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{AggError, AggregateConfig, Aggregator, AliasMap, AnswerSet};
use crate::corpus::Corpus;
use crate::disambiguation::{parse_query, parse_query_rules, DisambiguationError};
use crate::filter::{CandidateSet, FilterConfig, FilterError, FilterSession, SessionState, DEFAULT_BUDGET};
use crate::llm::{BudgetCeilings, HttpBackend, HttpBackendConfig, LlmBackend, LlmClient, LlmError, ScriptedBackend};
use crate::prompts::{PromptSet, TemplateError};
use crate::query::QuerySpec;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Disambiguation(#[from] DisambiguationError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Aggregate(#[from] AggError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Planner-driven filtering.
    Planner,
    /// Keep the whole corpus.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    Rules,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub parse: ParseMode,
    pub filter_mode: FilterMode,
    pub budget: u32,
    /// Probe discarded chunks with the judge after every filtering step.
    pub probe: bool,
    pub filter: FilterConfig,
    pub aggregate: AggregateConfig,
    pub aliases: AliasMap,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            parse: ParseMode::Rules,
            filter_mode: FilterMode::Planner,
            budget: DEFAULT_BUDGET,
            probe: true,
            filter: FilterConfig::default(),
            aggregate: AggregateConfig::default(),
            aliases: AliasMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QueryRun {
    pub query: QuerySpec,
    pub candidates: CandidateSet,
    pub answer: AnswerSet,
    pub session: Option<SessionState>,
}

pub fn parse_with(
    mode: ParseMode,
    raw: &str,
    client: &LlmClient,
    prompts: &PromptSet,
) -> Result<QuerySpec, PipelineError> {
    Ok(match mode {
        ParseMode::Rules => parse_query_rules(raw)?,
        ParseMode::Llm => parse_query(raw, client, prompts)?,
    })
}

/// Filter, then aggregate, a query that is already disambiguated.
pub fn run_query(
    corpus: Arc<Corpus>,
    q: &QuerySpec,
    client: &LlmClient,
    prompts: &PromptSet,
    cfg: &PipelineConfig,
) -> Result<QueryRun, PipelineError> {
    let mut session = FilterSession::open(corpus.clone(), q.clone(), cfg.budget, cfg.filter.clone())?;
    let candidates = match cfg.filter_mode {
        FilterMode::Identity => session.finalize_candidates(),
        FilterMode::Planner => session.run(client, prompts, cfg.probe)?,
    };
    let aggregator = Aggregator::new(&corpus, client, prompts, cfg.aggregate.clone()).with_aliases(cfg.aliases.clone());
    let run = aggregator.run(q, &candidates)?;
    Ok(QueryRun { query: q.clone(), candidates, answer: run.answer, session: Some(session.into_state()) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Scripted,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub backend: BackendKind,
    /// Script file (JSON array of entries) for the scripted backend.
    pub script: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub context_limit: Option<usize>,
    pub max_parallel: usize,
    pub ceilings: BudgetCeilings,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Scripted,
            script: None,
            endpoint: None,
            model: None,
            api_key_env: None,
            context_limit: None,
            max_parallel: 4,
            ceilings: BudgetCeilings::default(),
        }
    }
}

impl LlmConfig {
    /// Build a client; relative script paths resolve against `base`.
    pub fn build_client(&self, base: &Path) -> Result<LlmClient, PipelineError> {
        let backend: Arc<dyn LlmBackend> = match self.backend {
            BackendKind::Scripted => {
                let mut b = ScriptedBackend::new();
                if let Some(limit) = self.context_limit {
                    b = b.with_context_limit(limit);
                }
                if let Some(script) = &self.script {
                    let path = if script.is_absolute() { script.clone() } else { base.join(script) };
                    b.load_file(&path)?;
                }
                Arc::new(b)
            }
            BackendKind::Http => {
                let endpoint = self
                    .endpoint
                    .clone()
                    .ok_or_else(|| PipelineError::Config("http backend needs `endpoint`".into()))?;
                let model =
                    self.model.clone().ok_or_else(|| PipelineError::Config("http backend needs `model`".into()))?;
                let api_key = match &self.api_key_env {
                    Some(var) => Some(
                        std::env::var(var)
                            .map_err(|_| PipelineError::Config(format!("environment variable {var} is not set")))?,
                    ),
                    None => None,
                };
                Arc::new(HttpBackend::new(HttpBackendConfig {
                    endpoint,
                    model,
                    api_key,
                    context_limit: self.context_limit,
                    timeout_secs: 120,
                })?)
            }
        };
        Ok(LlmClient::new(backend).with_ceilings(self.ceilings).with_max_parallel(self.max_parallel))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub epsilon: f64,
    /// Evaluate the rank-then-read baseline with this k instead of the pipeline.
    pub naive_rag_k: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { epsilon: crate::eval::DEFAULT_EPSILON, naive_rag_k: None }
    }
}

/// Contents of a `run.toml`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub llm: LlmConfig,
    pub eval: EvalConfig,
    /// Directory overriding the built-in prompt templates.
    pub prompts: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn prompt_set(&self, base: &Path) -> Result<PromptSet, PipelineError> {
        match &self.prompts {
            Some(dir) => {
                let dir = if dir.is_absolute() { dir.clone() } else { base.join(dir) };
                Ok(PromptSet::load_dir(&dir)?)
            }
            None => Ok(PromptSet::builtin()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_parses_partial_toml() {
        let cfg = RunConfig::from_toml(
            r#"
            [pipeline]
            filter_mode = "identity"
            budget = 3

            [pipeline.aggregate]
            lambda = 0.25
            max_context = 4000

            [llm]
            backend = "scripted"
            script = "fixtures.json"

            [llm.ceilings]
            max_calls = 50
            "#,
        )
        .unwrap();
        assert_eq!(cfg.pipeline.filter_mode, FilterMode::Identity);
        assert_eq!(cfg.pipeline.budget, 3);
        assert_eq!(cfg.pipeline.aggregate.lambda, 0.25);
        assert_eq!(cfg.pipeline.aggregate.prompt_overhead, 1000);
        assert_eq!(cfg.llm.ceilings.max_calls, Some(50));
        assert_eq!(cfg.eval.epsilon, 1e-9);
        assert!(RunConfig::from_toml("[pipeline]\nbudget = \"x\"").is_err());
    }
}
