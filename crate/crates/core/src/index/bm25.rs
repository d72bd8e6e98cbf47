//! Okapi BM25 over chunk texts.
//!
//! score(q, c) = Σ_{t ∈ distinct(q)} idf(t) · tf(t,c)·(k1+1) / (tf(t,c) + k1·(1 − b + b·|c|/avgdl))
//! idf(t)      = ln(1 + (N − df(t) + 0.5) / (df(t) + 0.5))
//!
//! Terms come from [`crate::tokenize::analyze`]; `|c|` is the analyzed term count.
//!
//! Persisted layout:
//!
//! ```text
//! index/
//!   manifest.json   Bm25Manifest (version, k1, b, N, avgdl, per-chunk lengths)
//!   postings.jsonl  {"term": t, "postings": [[chunk_id, tf], ...]} sorted by term
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::IndexError;
use crate::corpus::{ChunkId, Corpus};
use crate::tokenize::analyze;

pub const BM25_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    k1: f64,
    b: f64,
    avg_len: f64,
    lengths: BTreeMap<ChunkId, usize>,
    postings: BTreeMap<String, BTreeMap<ChunkId, u32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Bm25Manifest {
    format_version: u32,
    analyzer: String,
    k1: f64,
    b: f64,
    doc_count: usize,
    avg_len: f64,
    lengths: BTreeMap<ChunkId, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PostingLine {
    term: String,
    postings: Vec<(ChunkId, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk_id: ChunkId,
    pub score: f64,
}

impl Bm25Index {
    pub fn build(corpus: &Corpus, k1: f64, b: f64) -> Result<Self, IndexError> {
        Self::from_texts(corpus.chunks().map(|c| (c.chunk_id.as_str(), c.text.as_str())), k1, b)
    }

    pub fn from_texts<'a>(
        texts: impl IntoIterator<Item = (&'a str, &'a str)>,
        k1: f64,
        b: f64,
    ) -> Result<Self, IndexError> {
        if k1.is_nan() || k1 <= 0.0 || !(0.0..=1.0).contains(&b) {
            return Err(IndexError::InvalidParams(format!("k1={k1} b={b}")));
        }
        let mut lengths = BTreeMap::new();
        let mut postings: BTreeMap<String, BTreeMap<ChunkId, u32>> = BTreeMap::new();
        for (id, text) in texts {
            let terms = analyze(text);
            lengths.insert(id.to_string(), terms.len());
            for term in terms {
                *postings.entry(term).or_default().entry(id.to_string()).or_insert(0) += 1;
            }
        }
        if lengths.is_empty() {
            return Err(IndexError::EmptyCorpus);
        }
        let total: usize = lengths.values().sum();
        let avg_len = total as f64 / lengths.len() as f64;
        Ok(Self { k1, b, avg_len, lengths, postings })
    }

    pub fn doc_count(&self) -> usize {
        self.lengths.len()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn params(&self) -> (f64, f64) {
        (self.k1, self.b)
    }

    pub fn postings(&self, term: &str) -> Option<&BTreeMap<ChunkId, u32>> {
        self.postings.get(term)
    }

    pub fn vocabulary_size(&self) -> usize {
        self.postings.len()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count() as f64;
        let df = self.postings.get(term).map_or(0, |p| p.len()) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, tf: f64, len: f64) -> f64 {
        let norm = if self.avg_len > 0.0 { len / self.avg_len } else { 0.0 };
        tf * (self.k1 + 1.0) / (tf + self.k1 * (1.0 - self.b + self.b * norm))
    }

    /// Score one indexed chunk against a query. Unknown chunks score 0.
    pub fn score(&self, query_text: &str, chunk_id: &str) -> f64 {
        let Some(&len) = self.lengths.get(chunk_id) else {
            return 0.0;
        };
        distinct_terms(query_text)
            .iter()
            .filter_map(|t| {
                let tf = *self.postings.get(t)?.get(chunk_id)?;
                Some(self.idf(t) * self.term_weight(tf as f64, len as f64))
            })
            .sum()
    }

    /// Top `k` chunks with positive score, by descending score then ascending chunk id.
    pub fn top_k(&self, query_text: &str, k: usize) -> Vec<ScoredChunk> {
        let mut acc: BTreeMap<&str, f64> = BTreeMap::new();
        for term in distinct_terms(query_text) {
            let Some(list) = self.postings.get(&term) else { continue };
            let idf = self.idf(&term);
            for (id, &tf) in list {
                let len = self.lengths[id] as f64;
                *acc.entry(id.as_str()).or_insert(0.0) += idf * self.term_weight(tf as f64, len);
            }
        }
        let mut ranked: Vec<ScoredChunk> = acc
            .into_iter()
            .filter(|(_, s)| *s > 0.0)
            .map(|(id, score)| ScoredChunk { chunk_id: id.to_string(), score })
            .collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.chunk_id.cmp(&b.chunk_id)));
        ranked.truncate(k);
        ranked
    }

    pub fn save(&self, dir: &Path) -> Result<(), IndexError> {
        fs::create_dir_all(dir)?;
        let manifest = Bm25Manifest {
            format_version: BM25_FORMAT_VERSION,
            analyzer: "lowercase-alnum-v1".into(),
            k1: self.k1,
            b: self.b,
            doc_count: self.doc_count(),
            avg_len: self.avg_len,
            lengths: self.lengths.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| IndexError::Format(e.to_string()))?;
        fs::write(dir.join("manifest.json"), text + "\n")?;
        let mut out = std::io::BufWriter::new(fs::File::create(dir.join("postings.jsonl"))?);
        for (term, list) in &self.postings {
            let line =
                PostingLine { term: term.clone(), postings: list.iter().map(|(id, tf)| (id.clone(), *tf)).collect() };
            let line = serde_json::to_string(&line).map_err(|e| IndexError::Format(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, IndexError> {
        let manifest: Bm25Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)
            .map_err(|e| IndexError::Format(e.to_string()))?;
        if manifest.format_version != BM25_FORMAT_VERSION {
            return Err(IndexError::Format(format!("unsupported index version {}", manifest.format_version)));
        }
        let mut postings = BTreeMap::new();
        for line in BufReader::new(fs::File::open(dir.join("postings.jsonl"))?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let p: PostingLine = serde_json::from_str(&line).map_err(|e| IndexError::Format(e.to_string()))?;
            postings.insert(p.term, p.postings.into_iter().collect());
        }
        Ok(Self { k1: manifest.k1, b: manifest.b, avg_len: manifest.avg_len, lengths: manifest.lengths, postings })
    }
}

fn distinct_terms(text: &str) -> BTreeSet<String> {
    analyze(text).into_iter().collect()
}
