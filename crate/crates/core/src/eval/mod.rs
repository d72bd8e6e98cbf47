//! Gold sets, count and recall metrics, benchmark reports, the
//! rank-then-read baseline and BM25 corpus expansion.

mod baseline;
mod expand;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::AggError;
use crate::corpus::{ChunkId, Corpus};
use crate::disambiguation::parse_query_rules;
use crate::index::IndexError;
use crate::llm::{LedgerSnapshot, LlmClient};
use crate::pipeline::{run_query, PipelineConfig, PipelineError};
use crate::prompts::PromptSet;
use crate::query::QuerySpec;

pub use baseline::{naive_rag_baseline, RagRun};
pub use expand::{expand_corpus, score_histogram, ExpansionReport, HistogramBin, PoolScore};

pub const DEFAULT_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gold evidence is empty")]
    EmptyGold,
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("gold query {query_id} cites unknown chunk {chunk_id}")]
    UnknownEvidence { query_id: String, chunk_id: ChunkId },
    #[error("duplicate gold query id {0}")]
    DuplicateQuery(String),
    #[error("invalid interval [{lo}, {hi}]")]
    BadInterval { lo: f64, hi: f64 },
    #[error("k must be positive")]
    ZeroK,
    #[error("gold file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Aggregate(#[from] AggError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

pub fn ace(pred: usize, gold: usize) -> u64 {
    pred.abs_diff(gold) as u64
}

/// |pred - gold| / (gold + epsilon)
pub fn nace(pred: usize, gold: usize, epsilon: f64) -> Result<f64, EvalError> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(EvalError::BadEpsilon(epsilon));
    }
    Ok(pred.abs_diff(gold) as f64 / (gold as f64 + epsilon))
}

/// Share of gold evidence chunks present in `retained`.
pub fn chunk_recall<A: AsRef<str>, B: AsRef<str>>(retained: &[A], gold: &[B]) -> Result<f64, EvalError> {
    let gold: BTreeSet<&str> = gold.iter().map(|s| s.as_ref()).collect();
    if gold.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    let retained: BTreeSet<&str> = retained.iter().map(|s| s.as_ref()).collect();
    Ok(gold.intersection(&retained).count() as f64 / gold.len() as f64)
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Middle value; the mean of the two middle values for even lengths.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    #[default]
    Base,
    Composite,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompositionMeta {
    #[serde(default)]
    pub kind: QueryKind,
    /// "and" or "or" for composite queries.
    #[serde(default)]
    pub operator: Option<String>,
    #[serde(default)]
    pub condition_count: usize,
}

/// One line of a gold file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldQuery {
    pub query_id: String,
    pub question: String,
    pub entity_type: String,
    #[serde(default)]
    pub composition: CompositionMeta,
    pub gold_entities: Vec<String>,
    pub gold_evidence_chunk_ids: Vec<ChunkId>,
    /// Parsed query to run; when absent the question is parsed by rules.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<QuerySpec>,
}

impl GoldQuery {
    pub fn y(&self) -> usize {
        self.gold_entities.len()
    }

    pub fn to_spec(&self) -> Result<QuerySpec, PipelineError> {
        let mut spec = match &self.spec {
            Some(s) => s.clone(),
            None => parse_query_rules(&self.question)?,
        };
        spec.query_id = self.query_id.clone();
        spec.entity_type = self.entity_type.clone();
        Ok(spec)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GoldSet {
    pub queries: Vec<GoldQuery>,
}

impl GoldSet {
    pub fn new(queries: Vec<GoldQuery>) -> Result<Self, EvalError> {
        let mut seen = BTreeSet::new();
        for q in &queries {
            if !seen.insert(q.query_id.clone()) {
                return Err(EvalError::DuplicateQuery(q.query_id.clone()));
            }
        }
        Ok(Self { queries })
    }

    pub fn load_jsonl(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path)?;
        let mut queries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let q: GoldQuery = serde_json::from_str(line)
                .map_err(|e| EvalError::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            queries.push(q);
        }
        Self::new(queries)
    }

    /// Every evidence id must exist in `corpus`.
    pub fn validate(&self, corpus: &Corpus) -> Result<(), EvalError> {
        for q in &self.queries {
            if let Some(id) = q.gold_evidence_chunk_ids.iter().find(|id| !corpus.contains(id)) {
                return Err(EvalError::UnknownEvidence { query_id: q.query_id.clone(), chunk_id: id.clone() });
            }
        }
        Ok(())
    }

    pub fn all_evidence(&self) -> BTreeSet<&ChunkId> {
        self.queries.iter().flat_map(|q| q.gold_evidence_chunk_ids.iter()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub query_id: String,
    pub kind: QueryKind,
    #[serde(default)]
    pub operator: Option<String>,
    pub gold: usize,
    pub predicted: Option<usize>,
    pub ace: Option<u64>,
    pub nace: Option<f64>,
    pub recall: Option<f64>,
    pub evidence_hits: Option<usize>,
    pub evidence_total: usize,
    pub retained: Option<usize>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub queries: usize,
    pub failed: usize,
    pub mean_nace: Option<f64>,
    pub median_nace: Option<f64>,
    pub mean_ace: Option<f64>,
    /// Mean of per-query recall.
    pub mean_recall: Option<f64>,
    /// Evidence hits over evidence total, pooled across queries.
    pub micro_recall: Option<f64>,
}

impl Aggregates {
    /// Failed rows are counted but excluded from every average.
    pub fn from_rows(rows: &[QueryRow]) -> Self {
        let ok: Vec<&QueryRow> = rows.iter().filter(|r| r.error.is_none()).collect();
        let naces: Vec<f64> = ok.iter().filter_map(|r| r.nace).collect();
        let aces: Vec<f64> = ok.iter().filter_map(|r| r.ace.map(|a| a as f64)).collect();
        let recalls: Vec<f64> = ok.iter().filter_map(|r| r.recall).collect();
        let hits: usize = ok.iter().filter(|r| r.recall.is_some()).filter_map(|r| r.evidence_hits).sum();
        let total: usize = ok.iter().filter(|r| r.recall.is_some()).map(|r| r.evidence_total).sum();
        Self {
            queries: rows.len(),
            failed: rows.len() - ok.len(),
            mean_nace: mean(&naces),
            median_nace: median(&naces),
            mean_ace: mean(&aces),
            mean_recall: mean(&recalls),
            micro_recall: if total == 0 { None } else { Some(hits as f64 / total as f64) },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub system: String,
    pub backend: String,
    pub epsilon: f64,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub ledger: Option<LedgerSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metadata: RunMetadata,
    pub rows: Vec<QueryRow>,
    pub aggregates: Aggregates,
}

impl Report {
    pub fn new(metadata: RunMetadata, mut rows: Vec<QueryRow>) -> Self {
        rows.sort_by(|a, b| a.query_id.cmp(&b.query_id));
        let aggregates = Aggregates::from_rows(&rows);
        Self { metadata, rows, aggregates }
    }
}

/// Score one prediction against its gold entry.
pub fn score_row(
    gold: &GoldQuery,
    predicted: usize,
    retained: &[ChunkId],
    epsilon: f64,
) -> Result<QueryRow, EvalError> {
    let evidence_total = gold.gold_evidence_chunk_ids.iter().collect::<BTreeSet<_>>().len();
    let (recall, hits) = if evidence_total == 0 {
        (None, None)
    } else {
        let r = chunk_recall(retained, &gold.gold_evidence_chunk_ids)?;
        let retained_set: BTreeSet<&ChunkId> = retained.iter().collect();
        let hits = gold.gold_evidence_chunk_ids.iter().collect::<BTreeSet<_>>().intersection(&retained_set).count();
        (Some(r), Some(hits))
    };
    Ok(QueryRow {
        query_id: gold.query_id.clone(),
        kind: gold.composition.kind,
        operator: gold.composition.operator.clone(),
        gold: gold.y(),
        predicted: Some(predicted),
        ace: Some(ace(predicted, gold.y())),
        nace: Some(nace(predicted, gold.y(), epsilon)?),
        recall,
        evidence_hits: hits,
        evidence_total,
        retained: Some(retained.len()),
        error: None,
    })
}

fn error_row(gold: &GoldQuery, err: String) -> QueryRow {
    QueryRow {
        query_id: gold.query_id.clone(),
        kind: gold.composition.kind,
        operator: gold.composition.operator.clone(),
        gold: gold.y(),
        predicted: None,
        ace: None,
        nace: None,
        recall: None,
        evidence_hits: None,
        evidence_total: gold.gold_evidence_chunk_ids.iter().collect::<BTreeSet<_>>().len(),
        retained: None,
        error: Some(err),
    }
}

/// What a benchmark run evaluates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "snake_case")]
pub enum System {
    Pipeline(PipelineConfig),
    NaiveRag { k: usize, config: PipelineConfig },
}

impl System {
    fn name(&self) -> String {
        match self {
            System::Pipeline(_) => "pipeline".into(),
            System::NaiveRag { k, .. } => format!("naive_rag@{k}"),
        }
    }
}

/// Run every gold query. Per-query failures become error rows.
pub fn run_benchmark(
    corpus: Arc<Corpus>,
    gold: &GoldSet,
    system: &System,
    client: &LlmClient,
    prompts: &PromptSet,
    epsilon: f64,
) -> Result<Report, EvalError> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(EvalError::BadEpsilon(epsilon));
    }
    gold.validate(&corpus)?;
    let index = match system {
        System::NaiveRag { k, .. } => {
            if *k == 0 {
                return Err(EvalError::ZeroK);
            }
            Some(crate::index::Bm25Index::build(&corpus, crate::index::DEFAULT_K1, crate::index::DEFAULT_B)?)
        }
        System::Pipeline(_) => None,
    };
    let mut rows = Vec::new();
    for g in &gold.queries {
        let outcome: Result<(usize, Vec<ChunkId>), String> = (|| {
            let spec = g.to_spec().map_err(|e| e.to_string())?;
            match system {
                System::Pipeline(cfg) => {
                    let run = run_query(corpus.clone(), &spec, client, prompts, cfg).map_err(|e| e.to_string())?;
                    Ok((run.answer.count, run.candidates.chunk_ids))
                }
                System::NaiveRag { k, config } => {
                    let idx = index.as_ref().expect("index built for rag");
                    let run = naive_rag_baseline(&corpus, idx, &spec, *k, client, prompts, &config.aggregate)
                        .map_err(|e| e.to_string())?;
                    Ok((run.answer.count, run.retrieved))
                }
            }
        })();
        let row = match outcome {
            Ok((count, retained)) => score_row(g, count, &retained, epsilon)?,
            Err(e) => {
                log::warn!("query {} failed: {e}", g.query_id);
                error_row(g, e)
            }
        };
        rows.push(row);
    }
    let config = match system {
        System::Pipeline(c) | System::NaiveRag { config: c, .. } => serde_json::to_value(c).unwrap_or_default(),
    };
    let metadata = RunMetadata {
        system: system.name(),
        backend: client.backend().name().to_string(),
        epsilon,
        config,
        ledger: Some(client.ledger().snapshot()),
    };
    Ok(Report::new(metadata, rows))
}

/// Entities per gold query, keyed by query id; handy for fixtures.
pub fn gold_counts(gold: &GoldSet) -> BTreeMap<&str, usize> {
    gold.queries.iter().map(|q| (q.query_id.as_str(), q.y())).collect()
}
