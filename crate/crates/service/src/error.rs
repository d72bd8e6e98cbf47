use aggquery_core::aggregate::AggError;
use aggquery_core::disambiguation::DisambiguationError;
use aggquery_core::filter::FilterError;
use aggquery_core::llm::LlmError;
use aggquery_core::pipeline::PipelineError;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    InvalidRequest,
    UnknownCorpus,
    UnknownQuery,
    UnknownClarification,
    UnknownSnapshot,
    UnknownRoute,
    DuplicateQuery,
    WrongPhase,
    AlreadyResolved,
    InvalidTool,
    IdempotencyConflict,
    ResultNotReady,
    BudgetExhausted,
    LlmFailure,
    Internal,
}

impl ErrorCode {
    pub fn status(self) -> u16 {
        match self {
            ErrorCode::InvalidRequest => 400,
            ErrorCode::UnknownCorpus
            | ErrorCode::UnknownQuery
            | ErrorCode::UnknownClarification
            | ErrorCode::UnknownSnapshot
            | ErrorCode::UnknownRoute => 404,
            ErrorCode::DuplicateQuery
            | ErrorCode::WrongPhase
            | ErrorCode::AlreadyResolved
            | ErrorCode::IdempotencyConflict
            | ErrorCode::ResultNotReady => 409,
            ErrorCode::InvalidTool => 422,
            ErrorCode::BudgetExhausted => 429,
            ErrorCode::LlmFailure => 502,
            ErrorCode::Internal => 500,
        }
    }
}

/// Error envelope returned by every endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{message}")]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default)]
    pub detail: Value,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into(), detail: Value::Null }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    pub fn status(&self) -> u16 {
        self.code.status()
    }
}

impl From<LlmError> for ApiError {
    fn from(e: LlmError) -> Self {
        let code = match e {
            LlmError::BudgetExceeded(_) => ErrorCode::BudgetExhausted,
            _ => ErrorCode::LlmFailure,
        };
        ApiError::new(code, e.to_string())
    }
}

impl From<FilterError> for ApiError {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::Llm(l) => l.into(),
            FilterError::UnknownTool(_) | FilterError::InvalidParams { .. } => {
                ApiError::new(ErrorCode::InvalidTool, e.to_string())
            }
            FilterError::UnknownSnapshot(id) => ApiError::new(ErrorCode::UnknownSnapshot, e.to_string())
                .with_detail(serde_json::json!({ "snapshot_id": id })),
            FilterError::WrongTarget { .. } => ApiError::new(ErrorCode::InvalidRequest, e.to_string()),
            FilterError::MalformedPlan { ref raw, .. } | FilterError::MalformedProbe { ref raw, .. } => {
                let raw = raw.clone();
                ApiError::new(ErrorCode::LlmFailure, e.to_string()).with_detail(serde_json::json!({ "raw": raw }))
            }
            other => ApiError::new(ErrorCode::Internal, other.to_string()),
        }
    }
}

impl From<AggError> for ApiError {
    fn from(e: AggError) -> Self {
        match e {
            AggError::Llm(l) => l.into(),
            AggError::MalformedJudge { .. } | AggError::ContextOverflow { .. } => {
                ApiError::new(ErrorCode::LlmFailure, e.to_string())
            }
            AggError::InvalidParams(_) | AggError::ChunkTooLarge { .. } => {
                ApiError::new(ErrorCode::InvalidRequest, e.to_string())
            }
            other => ApiError::new(ErrorCode::Internal, other.to_string()),
        }
    }
}

impl From<DisambiguationError> for ApiError {
    fn from(e: DisambiguationError) -> Self {
        match e {
            DisambiguationError::Llm(l) => l.into(),
            DisambiguationError::MalformedResponse { .. } => ApiError::new(ErrorCode::LlmFailure, e.to_string()),
            DisambiguationError::AlreadyResolved(_) => ApiError::new(ErrorCode::AlreadyResolved, e.to_string()),
            DisambiguationError::Template(_) => ApiError::new(ErrorCode::Internal, e.to_string()),
            _ => ApiError::new(ErrorCode::InvalidRequest, e.to_string()),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Disambiguation(d) => d.into(),
            PipelineError::Filter(f) => f.into(),
            PipelineError::Aggregate(a) => a.into(),
            PipelineError::Llm(l) => l.into(),
            other => ApiError::new(ErrorCode::Internal, other.to_string()),
        }
    }
}
