//! Rank-then-read: judge only the top-k BM25 chunks for the question.

use super::EvalError;
use crate::aggregate::{AggregateConfig, Aggregator, AnswerSet};
use crate::corpus::{ChunkId, Corpus};
use crate::filter::CandidateSet;
use crate::index::Bm25Index;
use crate::llm::LlmClient;
use crate::prompts::PromptSet;
use crate::query::QuerySpec;

#[derive(Debug, Clone)]
pub struct RagRun {
    /// Retrieved chunks in rank order.
    pub retrieved: Vec<ChunkId>,
    pub answer: AnswerSet,
}

/// Retrieve the top `k` chunks for the raw question and read them with the
/// same batching and judge as the full pipeline. Chunks without lexical
/// overlap are never retrieved.
pub fn naive_rag_baseline(
    corpus: &Corpus,
    index: &Bm25Index,
    q: &QuerySpec,
    k: usize,
    client: &LlmClient,
    prompts: &PromptSet,
    config: &AggregateConfig,
) -> Result<RagRun, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let retrieved: Vec<ChunkId> = index.top_k(&q.raw_text, k).into_iter().map(|s| s.chunk_id).collect();
    let mut window = retrieved.clone();
    window.sort();
    let candidates =
        CandidateSet { query_id: q.query_id.clone(), snapshot_id: 0, chunk_ids: window, trail: Vec::new() };
    let answer = if candidates.chunk_ids.is_empty() {
        AnswerSet::from_entities(&q.query_id, Vec::new(), Vec::new())
    } else {
        Aggregator::new(corpus, client, prompts, config.clone()).run(q, &candidates)?.answer
    };
    Ok(RagRun { retrieved, answer })
}
