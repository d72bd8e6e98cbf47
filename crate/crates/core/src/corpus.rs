//! Document ingestion, sliding-window chunking, and the persisted chunk store.
//!
//! Chunks are fixed-size windows over whitespace tokens. With `max_tokens = m`
//! and `overlap = o`, window `i` starts at token `i * (m - o)` and holds up to
//! `m` tokens; the last window ends at the final token of the document.
//!
//! A chunk's character span runs from the start of its first token (or the
//! start of the document for ordinal 0) to the start of the first token after
//! the window (or the end of the document for the last chunk), so chunk texts
//! carry their trailing whitespace and the non-overlapping prefixes of the
//! chunks concatenate back to the original document.
//!
//! On-disk layout of a corpus directory:
//!
//! ```text
//! corpus/
//!   manifest.json   CorpusManifest (policy, tokenizer, counts, document index)
//!   chunks.jsonl    one Chunk per line, sorted by chunk_id
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenize::{char_slice, whitespace_tokens, WHITESPACE_TOKENIZER};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHUNKS_FILE: &str = "chunks.jsonl";
pub const CORPUS_FORMAT_VERSION: u32 = 1;

pub type ChunkId = String;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("duplicate doc_id `{0}`")]
    DuplicateDocId(String),
    #[error("document `{0}` is empty")]
    EmptyDocument(String),
    #[error("invalid chunk policy: {0}")]
    InvalidPolicy(String),
    #[error("unknown chunk id `{0}`")]
    UnknownChunk(String),
    #[error("corpus has no documents")]
    EmptyCorpus,
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { doc_id: doc_id.into(), text: text.into(), meta: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPolicy {
    pub max_tokens: usize,
    pub overlap: usize,
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        Self { max_tokens: 512, overlap: 64 }
    }
}

impl ChunkPolicy {
    pub fn new(max_tokens: usize, overlap: usize) -> Result<Self, CorpusError> {
        let policy = Self { max_tokens, overlap };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.max_tokens == 0 {
            return Err(CorpusError::InvalidPolicy("max_tokens must be at least 1".into()));
        }
        if self.overlap >= self.max_tokens {
            return Err(CorpusError::InvalidPolicy(format!(
                "overlap {} must be smaller than max_tokens {}",
                self.overlap, self.max_tokens
            )));
        }
        Ok(())
    }

    fn stride(&self) -> usize {
        self.max_tokens - self.overlap
    }
}

/// Character span `[start, end)` into the parent document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: ChunkId,
    pub doc_id: String,
    pub ordinal: usize,
    pub text: String,
    pub token_count: usize,
    pub span: Span,
}

pub fn chunk_id_for(doc_id: &str, ordinal: usize) -> ChunkId {
    format!("{doc_id}#{ordinal:05}")
}

/// Split one document into chunks under `policy`.
pub fn chunk_document(doc: &Document, policy: &ChunkPolicy) -> Result<Vec<Chunk>, CorpusError> {
    policy.validate()?;
    let tokens = whitespace_tokens(&doc.text);
    if tokens.is_empty() {
        return Err(CorpusError::EmptyDocument(doc.doc_id.clone()));
    }
    let doc_chars = doc.text.chars().count();
    let stride = policy.stride();

    let mut starts = vec![0usize];
    while starts.last().unwrap() + policy.max_tokens < tokens.len() {
        let next = starts.last().unwrap() + stride;
        starts.push(next);
    }

    let chunks = starts
        .iter()
        .enumerate()
        .map(|(ordinal, &first)| {
            let past = (first + policy.max_tokens).min(tokens.len());
            let start = if ordinal == 0 { 0 } else { tokens[first].start };
            let end = if past == tokens.len() { doc_chars } else { tokens[past].start };
            let text = char_slice(&doc.text, start, end).to_string();
            Chunk {
                chunk_id: chunk_id_for(&doc.doc_id, ordinal),
                doc_id: doc.doc_id.clone(),
                ordinal,
                token_count: past - first,
                text,
                span: Span { start, end },
            }
        })
        .collect();
    Ok(chunks)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentEntry {
    pub doc_id: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub char_len: usize,
    pub chunk_ids: Vec<ChunkId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub corpus_id: String,
    pub policy: ChunkPolicy,
    pub tokenizer: String,
    pub doc_count: usize,
    pub chunk_count: usize,
    pub token_total: usize,
    pub documents: Vec<DocumentEntry>,
}

/// Immutable chunked corpus. Iteration is ordered by chunk id.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    corpus_id: String,
    policy: ChunkPolicy,
    chunks: BTreeMap<ChunkId, Chunk>,
    docs: BTreeMap<String, DocumentEntry>,
}

impl Corpus {
    pub fn ingest(
        corpus_id: impl Into<String>,
        records: &[Document],
        policy: ChunkPolicy,
    ) -> Result<Self, CorpusError> {
        policy.validate()?;
        let mut seen = BTreeSet::new();
        for doc in records {
            if !seen.insert(doc.doc_id.as_str()) {
                return Err(CorpusError::DuplicateDocId(doc.doc_id.clone()));
            }
        }
        let mut chunks = BTreeMap::new();
        let mut docs = BTreeMap::new();
        for doc in records {
            let pieces = chunk_document(doc, &policy)?;
            docs.insert(
                doc.doc_id.clone(),
                DocumentEntry {
                    doc_id: doc.doc_id.clone(),
                    meta: doc.meta.clone(),
                    char_len: doc.text.chars().count(),
                    chunk_ids: pieces.iter().map(|c| c.chunk_id.clone()).collect(),
                },
            );
            for chunk in pieces {
                chunks.insert(chunk.chunk_id.clone(), chunk);
            }
        }
        Ok(Self { corpus_id: corpus_id.into(), policy, chunks, docs })
    }

    pub fn id(&self) -> &str {
        &self.corpus_id
    }

    pub fn policy(&self) -> ChunkPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn chunk(&self, id: &str) -> Option<&Chunk> {
        self.chunks.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.chunks.contains_key(id)
    }

    pub fn chunks(&self) -> impl Iterator<Item = &Chunk> {
        self.chunks.values()
    }

    pub fn chunk_ids(&self) -> impl Iterator<Item = &ChunkId> {
        self.chunks.keys()
    }

    pub fn documents(&self) -> impl Iterator<Item = &DocumentEntry> {
        self.docs.values()
    }

    pub fn document(&self, doc_id: &str) -> Option<&DocumentEntry> {
        self.docs.get(doc_id)
    }

    pub fn token_total(&self) -> usize {
        self.chunks.values().map(|c| c.token_count).sum()
    }

    /// Chunks for `ids`, in the requested order.
    pub fn get_chunks<S: AsRef<str>>(&self, ids: &[S]) -> Result<Vec<&Chunk>, CorpusError> {
        ids.iter()
            .map(|id| self.chunks.get(id.as_ref()).ok_or_else(|| CorpusError::UnknownChunk(id.as_ref().to_string())))
            .collect()
    }

    /// Rebuild a document's text from the non-overlapping prefixes of its chunks.
    pub fn reconstruct_document(&self, doc_id: &str) -> Option<String> {
        let entry = self.docs.get(doc_id)?;
        let chunks: Vec<&Chunk> = entry.chunk_ids.iter().filter_map(|id| self.chunks.get(id)).collect();
        let mut out = String::new();
        for (i, chunk) in chunks.iter().enumerate() {
            let keep = match chunks.get(i + 1) {
                Some(next) => next.span.start - chunk.span.start,
                None => chunk.span.end - chunk.span.start,
            };
            out.push_str(char_slice(&chunk.text, 0, keep));
        }
        Some(out)
    }

    pub fn manifest(&self) -> CorpusManifest {
        CorpusManifest {
            format_version: CORPUS_FORMAT_VERSION,
            corpus_id: self.corpus_id.clone(),
            policy: self.policy,
            tokenizer: WHITESPACE_TOKENIZER.to_string(),
            doc_count: self.docs.len(),
            chunk_count: self.chunks.len(),
            token_total: self.token_total(),
            documents: self.docs.values().cloned().collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir)?;
        let manifest =
            serde_json::to_string_pretty(&self.manifest()).map_err(|e| CorpusError::Format(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
        let mut out = std::io::BufWriter::new(fs::File::create(dir.join(CHUNKS_FILE))?);
        for chunk in self.chunks.values() {
            let line = serde_json::to_string(chunk).map_err(|e| CorpusError::Format(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let manifest: CorpusManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)
            .map_err(|e| CorpusError::Format(format!("{MANIFEST_FILE}: {e}")))?;
        if manifest.format_version != CORPUS_FORMAT_VERSION {
            return Err(CorpusError::Format(format!("unsupported corpus format version {}", manifest.format_version)));
        }
        let reader = BufReader::new(fs::File::open(dir.join(CHUNKS_FILE))?);
        let mut chunks = BTreeMap::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let chunk: Chunk = serde_json::from_str(&line)
                .map_err(|e| CorpusError::Format(format!("{CHUNKS_FILE}:{}: {e}", n + 1)))?;
            chunks.insert(chunk.chunk_id.clone(), chunk);
        }
        if chunks.len() != manifest.chunk_count {
            return Err(CorpusError::Format(format!(
                "manifest lists {} chunks, found {}",
                manifest.chunk_count,
                chunks.len()
            )));
        }
        let docs = manifest.documents.into_iter().map(|d| (d.doc_id.clone(), d)).collect();
        Ok(Self { corpus_id: manifest.corpus_id, policy: manifest.policy, chunks, docs })
    }
}

/// Read line-delimited JSON documents.
pub fn read_documents_jsonl(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut docs = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        docs.push(doc);
    }
    Ok(docs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub corpus_id: String,
    pub doc_count: usize,
    pub chunk_count: usize,
    pub token_total: usize,
    pub evidence_chunk_count: Option<usize>,
    pub evidence_density: Option<f64>,
}

/// Share of chunks that are evidence chunks.
pub fn evidence_density(evidence_chunks: usize, total_chunks: usize) -> f64 {
    if total_chunks == 0 {
        return 0.0;
    }
    evidence_chunks as f64 / total_chunks as f64
}

pub fn corpus_stats<S: AsRef<str>>(corpus: &Corpus, gold_evidence: Option<&[S]>) -> Result<StatsReport, CorpusError> {
    let (evidence_chunk_count, evidence_density) = match gold_evidence {
        Some(ids) => {
            let mut distinct = BTreeSet::new();
            for id in ids {
                let id = id.as_ref();
                if !corpus.contains(id) {
                    return Err(CorpusError::UnknownChunk(id.to_string()));
                }
                distinct.insert(id);
            }
            (Some(distinct.len()), Some(self::evidence_density(distinct.len(), corpus.len())))
        }
        None => (None, None),
    };
    Ok(StatsReport {
        corpus_id: corpus.id().to_string(),
        doc_count: corpus.doc_count(),
        chunk_count: corpus.len(),
        token_total: corpus.token_total(),
        evidence_chunk_count,
        evidence_density,
    })
}
