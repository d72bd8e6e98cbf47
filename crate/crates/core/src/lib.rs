//! Entity-level aggregation ("find-all") queries over chunked text corpora.
//!
//! The pipeline runs in three stages:
//!
//! 1. [`disambiguation`]: parse the question into an entity type and
//!    conditions, detect ambiguity sub-types, ask clarification questions,
//!    and rewrite the query under the confirmed interpretation.
//! 2. [`filter`]: iteratively narrow the corpus with filtering tools over
//!    immutable snapshots, detect over-filtering, and roll back.
//! 3. [`aggregate`]: cluster the surviving chunks, pack them into
//!    context-sized batches, judge each batch, and merge the findings into a
//!    deduplicated answer set.
//!
//! [`eval`] scores answers against gold sets and hosts the rank-then-read
//! baseline and BM25 corpus expansion.

pub mod aggregate;
pub mod corpus;
pub mod disambiguation;
pub mod eval;
pub mod filter;
pub mod index;
pub mod llm;
pub mod pipeline;
pub mod prompts;
pub mod query;
pub mod tokenize;

pub use corpus::{Chunk, ChunkId, ChunkPolicy, Corpus, Document};
pub use query::{AmbiguityCode, Composition, Condition, QuerySpec};
