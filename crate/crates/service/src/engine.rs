//! Query lifecycle behind the HTTP API. Everything here is synchronous; model
//! calls block, so async callers should run these methods on a blocking pool.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use aggquery_core::aggregate::{Aggregator, AnswerSet};
use aggquery_core::disambiguation::{
    apply_answer, classify_ambiguity, generate_clarifications, rewrite_query, skip_clarification, Classifier,
    RewriteMode,
};
use aggquery_core::filter::{
    CandidateSet, FilterSession, Observation, OverfilterReport, PlanDecision, SessionState, ToolInvocation, TrailEntry,
};
use aggquery_core::index::TrigramHashEmbedder;
use aggquery_core::llm::LlmClient;
use aggquery_core::pipeline::{parse_with, PipelineConfig};
use aggquery_core::prompts::PromptSet;
use aggquery_core::query::Clarification;
use aggquery_core::{Corpus, QuerySpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ApiError, ErrorCode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Clarifying,
    Filtering,
    Aggregating,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    Rules,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub pipeline: PipelineConfig,
    pub classifier: ClassifierMode,
    /// Let the model phrase clarification questions.
    pub clarify_with_llm: bool,
    pub rewrite: RewriteMode,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            classifier: ClassifierMode::Rules,
            clarify_with_llm: false,
            rewrite: RewriteMode::ClassificationGuided,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateQuery {
    pub corpus_id: String,
    pub question: String,
    #[serde(default)]
    pub query_id: Option<String>,
    /// Pre-parsed query; skips parsing but not clarification.
    #[serde(default)]
    pub spec: Option<QuerySpec>,
    /// Accept the literal reading for every ambiguity.
    #[serde(default)]
    pub skip_clarifications: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClarificationReply {
    #[serde(default)]
    pub answer: Option<String>,
    #[serde(default)]
    pub skip: bool,
}

/// Empty body: ask the planner. With `tool`: apply that tool to the active
/// snapshot directly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRequest {
    #[serde(default)]
    pub tool: Option<String>,
    #[serde(default)]
    pub params: Option<Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RollbackRequest {
    /// Defaults to the most recent snapshot above the over-filter floor.
    #[serde(default)]
    pub snapshot_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSummary {
    pub snapshot_id: u32,
    pub parent_id: Option<u32>,
    pub retained: usize,
    pub discarded: usize,
    pub invocation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterView {
    pub active_snapshot: u32,
    pub budget: u32,
    pub iterations_used: u32,
    pub snapshots: Vec<SnapshotSummary>,
    pub trail: Vec<TrailEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryView {
    pub query_id: String,
    pub corpus_id: String,
    pub phase: Phase,
    pub question: String,
    pub spec: QuerySpec,
    pub clarifications: Vec<Clarification>,
    pub filter: Option<FilterView>,
    pub candidates: Option<usize>,
    pub answer_count: Option<usize>,
    pub error: Option<ApiError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub decision: PlanDecision,
    pub observation: Option<Observation>,
    pub overfilter: Option<OverfilterReport>,
    pub query: QueryView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub corpus_id: String,
    pub documents: usize,
    pub chunks: usize,
    pub tokens: usize,
}

#[derive(Debug, Clone)]
struct QueryRecord {
    query_id: String,
    corpus: Arc<Corpus>,
    phase: Phase,
    question: String,
    spec: QuerySpec,
    clarifications: Vec<Clarification>,
    session: Option<SessionState>,
    candidates: Option<CandidateSet>,
    answer: Option<AnswerSet>,
    error: Option<ApiError>,
}

impl QueryRecord {
    fn view(&self) -> QueryView {
        let filter = self.session.as_ref().map(|s| FilterView {
            active_snapshot: s.active,
            budget: s.budget,
            iterations_used: s.iterations_used,
            snapshots: s
                .snapshots
                .iter()
                .map(|snap| SnapshotSummary {
                    snapshot_id: snap.snapshot_id,
                    parent_id: snap.parent_id,
                    retained: snap.retained.len(),
                    discarded: snap.discarded.len(),
                    invocation: snap.invocation.as_ref().map(|i| i.to_string()),
                })
                .collect(),
            trail: s.trail(),
        });
        QueryView {
            query_id: self.query_id.clone(),
            corpus_id: self.corpus.id().to_string(),
            phase: self.phase,
            question: self.question.clone(),
            spec: self.spec.clone(),
            clarifications: self.clarifications.clone(),
            filter,
            candidates: self.candidates.as_ref().map(|c| c.chunk_ids.len()),
            answer_count: self.answer.as_ref().map(|a| a.count),
            error: self.error.clone(),
        }
    }

    fn expect_phase(&self, allowed: &[Phase]) -> Result<(), ApiError> {
        if allowed.contains(&self.phase) {
            return Ok(());
        }
        Err(ApiError::new(ErrorCode::WrongPhase, format!("query {} is {:?}", self.query_id, self.phase))
            .with_detail(serde_json::json!({ "phase": self.phase, "allowed": allowed })))
    }
}

enum IdempotentSlot {
    InFlight,
    Done { fingerprint: String, status: u16, body: Value },
}

/// Stored responses for requests carrying an idempotency key.
#[derive(Default)]
pub struct IdempotencyCache {
    entries: Mutex<BTreeMap<(String, String), IdempotentSlot>>,
}

pub enum Reservation {
    /// First time this key is seen; run the request and call `complete`.
    Fresh,
    /// Same key and body as a finished request.
    Replay { status: u16, body: Value },
}

impl IdempotencyCache {
    pub fn reserve(&self, route: &str, key: &str, fingerprint: &str) -> Result<Reservation, ApiError> {
        let mut entries = self.entries.lock().expect("idempotency lock");
        let slot_key = (route.to_string(), key.to_string());
        match entries.get(&slot_key) {
            None => {
                entries.insert(slot_key, IdempotentSlot::InFlight);
                Ok(Reservation::Fresh)
            }
            Some(IdempotentSlot::InFlight) => {
                Err(ApiError::new(ErrorCode::IdempotencyConflict, format!("request with key {key} is still running")))
            }
            Some(IdempotentSlot::Done { fingerprint: f, status, body }) => {
                if f == fingerprint {
                    Ok(Reservation::Replay { status: *status, body: body.clone() })
                } else {
                    Err(ApiError::new(
                        ErrorCode::IdempotencyConflict,
                        format!("key {key} was already used with a different request body"),
                    ))
                }
            }
        }
    }

    pub fn complete(&self, route: &str, key: &str, fingerprint: &str, status: u16, body: &Value) {
        let mut entries = self.entries.lock().expect("idempotency lock");
        entries.insert(
            (route.to_string(), key.to_string()),
            IdempotentSlot::Done { fingerprint: fingerprint.to_string(), status, body: body.clone() },
        );
    }

    /// Forget an in-flight key whose request failed so it can be retried.
    pub fn release(&self, route: &str, key: &str) {
        let mut entries = self.entries.lock().expect("idempotency lock");
        let slot_key = (route.to_string(), key.to_string());
        if matches!(entries.get(&slot_key), Some(IdempotentSlot::InFlight)) {
            entries.remove(&slot_key);
        }
    }
}

pub struct QueryService {
    corpora: RwLock<BTreeMap<String, Arc<Corpus>>>,
    queries: Mutex<BTreeMap<String, Arc<Mutex<QueryRecord>>>>,
    client: LlmClient,
    prompts: PromptSet,
    config: ServiceConfig,
    next_id: AtomicU64,
    pub idempotency: IdempotencyCache,
}

impl QueryService {
    pub fn new(client: LlmClient, prompts: PromptSet, config: ServiceConfig) -> Self {
        Self {
            corpora: RwLock::new(BTreeMap::new()),
            queries: Mutex::new(BTreeMap::new()),
            client,
            prompts,
            config,
            next_id: AtomicU64::new(1),
            idempotency: IdempotencyCache::default(),
        }
    }

    pub fn add_corpus(&self, corpus: Corpus) {
        self.corpora.write().expect("corpora lock").insert(corpus.id().to_string(), Arc::new(corpus));
    }

    pub fn client(&self) -> &LlmClient {
        &self.client
    }

    pub fn corpora(&self) -> Vec<CorpusInfo> {
        self.corpora
            .read()
            .expect("corpora lock")
            .values()
            .map(|c| CorpusInfo {
                corpus_id: c.id().to_string(),
                documents: c.doc_count(),
                chunks: c.len(),
                tokens: c.token_total(),
            })
            .collect()
    }

    fn record(&self, query_id: &str) -> Result<Arc<Mutex<QueryRecord>>, ApiError> {
        self.queries
            .lock()
            .expect("queries lock")
            .get(query_id)
            .cloned()
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownQuery, format!("unknown query {query_id}")))
    }

    fn with_record<T>(
        &self,
        query_id: &str,
        f: impl FnOnce(&mut QueryRecord) -> Result<T, ApiError>,
    ) -> Result<T, ApiError> {
        let rec = self.record(query_id)?;
        let mut guard = rec.lock().expect("query lock");
        f(&mut guard)
    }

    pub fn create_query(&self, req: CreateQuery) -> Result<QueryView, ApiError> {
        if req.question.trim().is_empty() && req.spec.is_none() {
            return Err(ApiError::new(ErrorCode::InvalidRequest, "question is empty"));
        }
        let corpus = self
            .corpora
            .read()
            .expect("corpora lock")
            .get(&req.corpus_id)
            .cloned()
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownCorpus, format!("unknown corpus {}", req.corpus_id)))?;
        let query_id = match &req.query_id {
            Some(id) if id.trim().is_empty() => {
                return Err(ApiError::new(ErrorCode::InvalidRequest, "query_id is empty"))
            }
            Some(id) => id.clone(),
            None => format!("q{:04}", self.next_id.fetch_add(1, Ordering::Relaxed)),
        };
        // reserve the id before the (possibly slow) parse
        let placeholder = Arc::new(Mutex::new(QueryRecord {
            query_id: query_id.clone(),
            corpus: corpus.clone(),
            phase: Phase::Clarifying,
            question: req.question.clone(),
            spec: QuerySpec::simple(&query_id, &req.question, "entity", &req.question),
            clarifications: Vec::new(),
            session: None,
            candidates: None,
            answer: None,
            error: None,
        }));
        let mut guard = placeholder.lock().expect("query lock");
        {
            let mut queries = self.queries.lock().expect("queries lock");
            if queries.contains_key(&query_id) {
                return Err(ApiError::new(ErrorCode::DuplicateQuery, format!("query {query_id} already exists")));
            }
            queries.insert(query_id.clone(), placeholder.clone());
        }
        match self.start_query(&mut guard, &req) {
            Ok(()) => Ok(guard.view()),
            Err(e) => {
                drop(guard);
                self.queries.lock().expect("queries lock").remove(&query_id);
                Err(e)
            }
        }
    }

    fn start_query(&self, rec: &mut QueryRecord, req: &CreateQuery) -> Result<(), ApiError> {
        let mut spec = match &req.spec {
            Some(spec) => spec.clone(),
            None => parse_with(self.config.pipeline.parse, &req.question, &self.client, &self.prompts)?,
        };
        spec.query_id = rec.query_id.clone();
        let classifier = match self.config.classifier {
            ClassifierMode::Rules => Classifier::Rules,
            ClassifierMode::Llm => Classifier::Llm { client: &self.client, prompts: &self.prompts },
        };
        let labels = classify_ambiguity(&spec, &classifier)?;
        let llm = self.config.clarify_with_llm.then_some(&self.client);
        let mut clarifications = generate_clarifications(&spec, &labels, &self.prompts, llm)?;
        if req.skip_clarifications {
            for c in &mut clarifications {
                skip_clarification(c)?;
            }
        }
        rec.spec = spec;
        rec.clarifications = clarifications;
        if rec.clarifications.iter().all(|c| c.is_resolved()) {
            self.begin_filtering(rec)?;
        }
        Ok(())
    }

    fn begin_filtering(&self, rec: &mut QueryRecord) -> Result<(), ApiError> {
        let llm = matches!(self.config.classifier, ClassifierMode::Llm).then_some(&self.client);
        let rewritten = rewrite_query(&rec.spec, &rec.clarifications, self.config.rewrite, &self.prompts, llm)?;
        let cfg = &self.config.pipeline;
        let session = FilterSession::open(rec.corpus.clone(), rewritten.clone(), cfg.budget, cfg.filter.clone())?;
        rec.spec = rewritten;
        rec.session = Some(session.into_state());
        rec.phase = Phase::Filtering;
        Ok(())
    }

    pub fn get(&self, query_id: &str) -> Result<QueryView, ApiError> {
        self.with_record(query_id, |rec| Ok(rec.view()))
    }

    pub fn clarify(
        &self,
        query_id: &str,
        clarification_id: &str,
        reply: ClarificationReply,
    ) -> Result<QueryView, ApiError> {
        self.with_record(query_id, |rec| {
            rec.expect_phase(&[Phase::Clarifying])?;
            let idx =
                rec.clarifications.iter().position(|c| c.clarification_id == clarification_id).ok_or_else(|| {
                    ApiError::new(ErrorCode::UnknownClarification, format!("unknown clarification {clarification_id}"))
                })?;
            let mut clarification = rec.clarifications[idx].clone();
            match (reply.answer.as_deref(), reply.skip) {
                (Some(_), true) | (None, false) => {
                    return Err(ApiError::new(
                        ErrorCode::InvalidRequest,
                        "send exactly one of `answer` or `skip: true`",
                    ));
                }
                (Some(answer), false) => rec.spec = apply_answer(&rec.spec, &mut clarification, answer)?,
                (None, true) => skip_clarification(&mut clarification)?,
            }
            rec.clarifications[idx] = clarification;
            if rec.clarifications.iter().all(|c| c.is_resolved()) {
                self.begin_filtering(rec)?;
            }
            Ok(rec.view())
        })
    }

    fn session(&self, rec: &QueryRecord) -> Result<FilterSession, ApiError> {
        let state = rec.session.clone().ok_or_else(|| ApiError::new(ErrorCode::Internal, "filter session missing"))?;
        Ok(FilterSession::restore(rec.corpus.clone(), state, Arc::new(TrigramHashEmbedder::default()))?)
    }

    pub fn filter_step(&self, query_id: &str, req: StepRequest) -> Result<StepOutcome, ApiError> {
        self.with_record(query_id, |rec| {
            rec.expect_phase(&[Phase::Filtering])?;
            let mut session = self.session(rec)?;
            let decision = match (req.tool, req.params) {
                (Some(tool), params) => PlanDecision::Invoke {
                    invocation: ToolInvocation::new(
                        tool,
                        params.unwrap_or(Value::Object(Default::default())),
                        session.active_id(),
                    ),
                },
                (None, Some(_)) => {
                    return Err(ApiError::new(ErrorCode::InvalidRequest, "`params` given without `tool`"))
                }
                (None, None) => {
                    let d = session.plan_step(&self.client, &self.prompts);
                    // planner calls consume budget even when they fail
                    rec.session = Some(session.state().clone());
                    d?
                }
            };
            let mut observation = None;
            let mut overfilter = None;
            match &decision {
                PlanDecision::Done { .. } => {
                    rec.candidates = Some(session.finalize_candidates());
                    rec.phase = Phase::Aggregating;
                }
                other => {
                    let active = session.execute(other)?;
                    observation = Some(session.observe(active)?);
                    let judge = self.config.pipeline.probe.then_some((&self.client, &self.prompts));
                    overfilter = Some(session.detect_overfilter(judge)?);
                }
            }
            rec.session = Some(session.into_state());
            Ok(StepOutcome { decision, observation, overfilter, query: rec.view() })
        })
    }

    pub fn rollback(&self, query_id: &str, req: RollbackRequest) -> Result<QueryView, ApiError> {
        self.with_record(query_id, |rec| {
            rec.expect_phase(&[Phase::Filtering])?;
            let mut session = self.session(rec)?;
            let target = req.snapshot_id.unwrap_or_else(|| session.default_rollback_target());
            session.rollback(target)?;
            rec.session = Some(session.into_state());
            Ok(rec.view())
        })
    }

    /// Hand the active snapshot to aggregation and run it.
    pub fn aggregate(&self, query_id: &str) -> Result<AnswerSet, ApiError> {
        self.with_record(query_id, |rec| {
            rec.expect_phase(&[Phase::Filtering, Phase::Aggregating])?;
            let candidates = match &rec.candidates {
                Some(c) if rec.phase == Phase::Aggregating => c.clone(),
                _ => self.session(rec)?.finalize_candidates(),
            };
            rec.candidates = Some(candidates.clone());
            rec.phase = Phase::Aggregating;
            let cfg = &self.config.pipeline;
            let result = Aggregator::new(&rec.corpus, &self.client, &self.prompts, cfg.aggregate.clone())
                .with_aliases(cfg.aliases.clone())
                .run(&rec.spec, &candidates);
            match result {
                Ok(run) => {
                    rec.answer = Some(run.answer.clone());
                    rec.phase = Phase::Done;
                    Ok(run.answer)
                }
                Err(e) => {
                    let err: ApiError = e.into();
                    rec.error = Some(err.clone());
                    rec.phase = Phase::Failed;
                    Err(err)
                }
            }
        })
    }

    pub fn result(&self, query_id: &str) -> Result<AnswerSet, ApiError> {
        self.with_record(query_id, |rec| match (&rec.phase, &rec.answer) {
            (Phase::Done, Some(a)) => Ok(a.clone()),
            (Phase::Failed, _) => {
                Err(rec.error.clone().unwrap_or_else(|| ApiError::new(ErrorCode::Internal, "query failed")))
            }
            (phase, _) => Err(ApiError::new(ErrorCode::ResultNotReady, format!("query {query_id} is {phase:?}"))
                .with_detail(serde_json::json!({ "phase": phase }))),
        })
    }
}
