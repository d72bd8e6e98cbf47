//! Corpus expansion: keep pool documents whose best BM25 match against the
//! core corpus lies in a closed score interval. Scores above the interval
//! indicate near-duplicates, scores below it off-topic documents.

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::corpus::{ChunkId, Document};
use crate::index::Bm25Index;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolScore {
    pub doc_id: String,
    /// Best score of the document text used as a query; 0 with no overlap.
    pub top1: f64,
    pub best_chunk: Option<ChunkId>,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub lo: f64,
    pub hi: f64,
    pub scores: Vec<PoolScore>,
    #[serde(skip)]
    pub kept: Vec<Document>,
}

pub fn expand_corpus(core: &Bm25Index, pool: &[Document], lo: f64, hi: f64) -> Result<ExpansionReport, EvalError> {
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(EvalError::BadInterval { lo, hi });
    }
    let mut scores = Vec::with_capacity(pool.len());
    let mut kept = Vec::new();
    for doc in pool {
        let best = core.top_k(&doc.text, 1).into_iter().next();
        let top1 = best.as_ref().map_or(0.0, |s| s.score);
        let keep = lo <= top1 && top1 <= hi;
        if keep {
            kept.push(doc.clone());
        }
        scores.push(PoolScore { doc_id: doc.doc_id.clone(), top1, best_chunk: best.map(|s| s.chunk_id), kept: keep });
    }
    Ok(ExpansionReport { lo, hi, scores, kept })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width histogram of pool scores, to help pick an interval. The last
/// bin is closed on the right.
pub fn score_histogram(scores: &[PoolScore], bins: usize) -> Vec<HistogramBin> {
    if scores.is_empty() || bins == 0 {
        return Vec::new();
    }
    let min = scores.iter().map(|s| s.top1).fold(f64::INFINITY, f64::min);
    let max = scores.iter().map(|s| s.top1).fold(f64::NEG_INFINITY, f64::max);
    let width = if max > min { (max - min) / bins as f64 } else { 1.0 };
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin { lo: min + i as f64 * width, hi: min + (i + 1) as f64 * width, count: 0 })
        .collect();
    for s in scores {
        let i = (((s.top1 - min) / width) as usize).min(bins - 1);
        out[i].count += 1;
    }
    out
}
