//! Lexical and vector indexing over chunks.

mod bm25;
mod embed;
mod tfidf;
mod vector;

use thiserror::Error;

pub use bm25::{Bm25Index, ScoredChunk, BM25_FORMAT_VERSION, DEFAULT_B, DEFAULT_K1};
pub use embed::{
    embed_texts, fnv1a64, EmbedError, EmbeddingProvider, HttpEmbedder, TrigramHashEmbedder, DEFAULT_EMBED_DIM,
};
pub use tfidf::{smoothed_idf, tfidf_features, TfidfModel};
pub use vector::{cosine_sim, weighted_mean, FeatureKind, FeatureVector};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("invalid BM25 parameters: {0}")]
    InvalidParams(String),
    #[error("index io: {0}")]
    Io(#[from] std::io::Error),
    #[error("index format: {0}")]
    Format(String),
}
