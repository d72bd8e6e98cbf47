//! Turn a candidate set into a deduplicated answer: cluster, batch, judge,
//! align.

pub mod batch;
pub mod cluster;
pub mod judge;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ChunkId, Corpus};
use crate::filter::{CandidateSet, TrailEntry};
use crate::index::{EmbedError, EmbeddingProvider, TrigramHashEmbedder};
use crate::llm::{LlmClient, LlmError};
use crate::prompts::{PromptSet, TemplateError};
use crate::query::QuerySpec;

pub use batch::{
    candidate_pairs, greedy_batch, insertion_order, merge_score, random_batches, split_cluster, unmerged_batches, Batch,
};
pub use cluster::{
    cluster_candidates, single_link_clusters, token_weighted_centroid, Cluster, ClusterMember, FeatureSet,
    FeatureWeights,
};
pub use judge::{
    align_findings, canonical_key, finding_candidate_pairs, judge_batch, judge_batches, judge_fixture_key, AliasMap,
    AnswerEntity, EntityFinding, JudgeOutput, RejectedFinding,
};

#[derive(Debug, Error)]
pub enum AggError {
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("invalid aggregation parameters: {0}")]
    InvalidParams(String),
    #[error("unknown chunk: {0}")]
    UnknownChunk(String),
    #[error("chunk {chunk_id} has {tokens} tokens and cannot fit a context of {max}")]
    ChunkTooLarge { chunk_id: ChunkId, tokens: usize, max: usize },
    #[error("batch {batch_id} needs {tokens} tokens but the backend allows {limit}")]
    ContextOverflow { batch_id: u32, tokens: usize, limit: usize },
    #[error("malformed judge output for batch {batch_id} ({reason}): {raw}")]
    MalformedJudge { batch_id: u32, reason: String, raw: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("embedding failed: {0}")]
    Embed(EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum BatchingMode {
    Semantic,
    Random { seed: u64 },
    Unmerged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionOrder {
    /// Descending token total, ties by cluster id.
    LargestFirst,
    /// Cluster order as produced by clustering.
    AsGiven,
}

pub const DEFAULT_MAX_CONTEXT: usize = 8000;
pub const DEFAULT_PROMPT_OVERHEAD: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregateConfig {
    pub lambda: f64,
    /// Judge context size in tokens.
    pub max_context: usize,
    /// Tokens reserved for instructions, conditions, chunk labels and output.
    pub prompt_overhead: usize,
    pub cluster_threshold: f64,
    /// Off: every chunk is its own cluster.
    pub clustering: bool,
    pub weights: FeatureWeights,
    pub batching: BatchingMode,
    pub insertion: InsertionOrder,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            max_context: DEFAULT_MAX_CONTEXT,
            prompt_overhead: DEFAULT_PROMPT_OVERHEAD,
            cluster_threshold: 0.6,
            clustering: true,
            weights: FeatureWeights::default(),
            batching: BatchingMode::Semantic,
            insertion: InsertionOrder::LargestFirst,
        }
    }
}

impl AggregateConfig {
    /// Token budget per batch.
    pub fn batch_tokens(&self) -> Result<usize, AggError> {
        match self.max_context.checked_sub(self.prompt_overhead) {
            Some(m) if m > 0 => Ok(m),
            _ => Err(AggError::InvalidParams(format!(
                "prompt overhead {} leaves no room in context {}",
                self.prompt_overhead, self.max_context
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregationStats {
    pub candidates: usize,
    pub clusters: usize,
    pub batches: usize,
    pub judge_calls: usize,
    pub candidate_pairs: usize,
    pub rejected: Vec<RejectedFinding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerSet {
    pub query_id: String,
    pub count: usize,
    pub entities: Vec<AnswerEntity>,
    #[serde(default)]
    pub trail: Vec<TrailEntry>,
    #[serde(default)]
    pub stats: AggregationStats,
}

impl AnswerSet {
    pub fn from_entities(query_id: &str, entities: Vec<AnswerEntity>, trail: Vec<TrailEntry>) -> Self {
        Self {
            query_id: query_id.to_string(),
            count: entities.len(),
            entities,
            trail,
            stats: AggregationStats::default(),
        }
    }

    pub fn canonical_names(&self) -> Vec<&str> {
        self.entities.iter().map(|e| e.canonical.as_str()).collect()
    }

    /// Same entities, evidence and verdicts, ignoring trail and stats.
    pub fn same_answer(&self, other: &AnswerSet) -> bool {
        self.count == other.count && self.entities == other.entities
    }
}

/// Everything produced along the way, for inspection and tests.
#[derive(Debug, Clone)]
pub struct AggregationRun {
    pub clusters: Vec<Cluster>,
    pub batches: Vec<Batch>,
    pub findings: Vec<EntityFinding>,
    pub answer: AnswerSet,
}

pub struct Aggregator<'a> {
    pub corpus: &'a Corpus,
    pub client: &'a LlmClient,
    pub prompts: &'a PromptSet,
    pub config: AggregateConfig,
    pub embedder: Arc<dyn EmbeddingProvider>,
    pub aliases: AliasMap,
}

impl<'a> Aggregator<'a> {
    pub fn new(corpus: &'a Corpus, client: &'a LlmClient, prompts: &'a PromptSet, config: AggregateConfig) -> Self {
        Self {
            corpus,
            client,
            prompts,
            config,
            embedder: Arc::new(TrigramHashEmbedder::default()),
            aliases: AliasMap::new(),
        }
    }

    pub fn with_aliases(mut self, aliases: AliasMap) -> Self {
        self.aliases = aliases;
        self
    }

    pub fn with_embedder(mut self, embedder: Arc<dyn EmbeddingProvider>) -> Self {
        self.embedder = embedder;
        self
    }

    /// Cluster and batch without judging.
    pub fn plan_batches(&self, chunk_ids: &[ChunkId]) -> Result<(Vec<Cluster>, Vec<Batch>), AggError> {
        let cfg = &self.config;
        let m = cfg.batch_tokens()?;
        if chunk_ids.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let features = FeatureSet::build(self.corpus, chunk_ids, self.embedder.as_ref(), cfg.weights)?;
        let threshold = if cfg.clustering { cfg.cluster_threshold } else { f64::INFINITY };
        let clusters = cluster_candidates(self.corpus, chunk_ids, &features, threshold)?;
        let ordered = match cfg.insertion {
            InsertionOrder::LargestFirst => insertion_order(&clusters),
            InsertionOrder::AsGiven => clusters.clone(),
        };
        let batches = match cfg.batching {
            BatchingMode::Semantic => greedy_batch(&ordered, m, cfg.lambda)?,
            BatchingMode::Random { seed } => random_batches(&ordered, m, seed)?,
            BatchingMode::Unmerged => unmerged_batches(&ordered, m)?,
        };
        Ok((clusters, batches))
    }

    pub fn run(&self, q: &QuerySpec, candidates: &CandidateSet) -> Result<AggregationRun, AggError> {
        let (clusters, batches) = self.plan_batches(&candidates.chunk_ids)?;
        let outputs = judge_batches(&batches, q, self.corpus, self.client, self.prompts)?;
        let mut findings = Vec::new();
        let mut rejected = Vec::new();
        for o in outputs {
            findings.extend(o.findings);
            rejected.extend(o.rejected);
        }
        let entities = align_findings(&findings, q, &self.aliases);
        let mut answer = AnswerSet::from_entities(&q.query_id, entities, candidates.trail.clone());
        answer.stats = AggregationStats {
            candidates: candidates.chunk_ids.len(),
            clusters: clusters.len(),
            batches: batches.len(),
            judge_calls: batches.len(),
            candidate_pairs: finding_candidate_pairs(&findings),
            rejected,
        };
        Ok(AggregationRun { clusters, batches, findings, answer })
    }
}
