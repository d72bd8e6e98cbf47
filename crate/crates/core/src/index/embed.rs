//! Embedding providers.
//!
//! [`TrigramHashEmbedder`] is the offline provider. For a text `s`:
//!
//! 1. lowercase `s` and take its Unicode scalar values;
//! 2. emit every window of 3 consecutive characters as a gram; a text shorter
//!    than 3 characters (but non-empty) is a single gram;
//! 3. each gram adds 1.0 to bucket `fnv1a64(utf8(gram)) mod dim`;
//! 4. L2-normalize (the empty string maps to the zero vector).
//!
//! FNV-1a 64: offset basis 0xcbf29ce484222325, prime 0x100000001b3, one
//! xor-then-multiply per byte.

use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use super::vector::{FeatureKind, FeatureVector};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding provider failed (retryable): {0}")]
    Retryable(String),
    #[error("embedding provider failed: {0}")]
    Fatal(String),
}

impl EmbedError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbedError::Retryable(_))
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[&str]) -> Result<Vec<FeatureVector>, EmbedError>;
}

pub fn embed_texts(texts: &[&str], provider: &dyn EmbeddingProvider) -> Result<Vec<FeatureVector>, EmbedError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    provider.embed(texts)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Clone)]
pub struct TrigramHashEmbedder {
    dim: usize,
}

pub const DEFAULT_EMBED_DIM: usize = 256;

impl Default for TrigramHashEmbedder {
    fn default() -> Self {
        Self { dim: DEFAULT_EMBED_DIM }
    }
}

impl TrigramHashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn embed_one(&self, text: &str) -> FeatureVector {
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        let mut values = vec![0.0; self.dim];
        let mut add = |gram: &[char]| {
            let s: String = gram.iter().collect();
            values[(fnv1a64(s.as_bytes()) % self.dim as u64) as usize] += 1.0;
        };
        if chars.len() < 3 {
            if !chars.is_empty() {
                add(&chars);
            }
        } else {
            chars.windows(3).for_each(&mut add);
        }
        FeatureVector::new(FeatureKind::Embedding, values).normalized()
    }
}

impl EmbeddingProvider for TrigramHashEmbedder {
    fn name(&self) -> &str {
        "trigram-hash-v1"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<FeatureVector>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// OpenAI-style `/embeddings` endpoint.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    dim: usize,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>, dim: usize) -> Self {
        let client =
            reqwest::blocking::Client::builder().timeout(Duration::from_secs(60)).build().expect("http client");
        Self { endpoint: endpoint.into(), model: model.into(), api_key, dim, client }
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn name(&self) -> &str {
        &self.model
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<FeatureVector>, EmbedError> {
        let url = format!("{}/embeddings", self.endpoint.trim_end_matches('/'));
        let mut req = self.client.post(url).json(&serde_json::json!({ "model": self.model, "input": texts }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| EmbedError::Retryable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            let msg = format!("{status}: {body}");
            return Err(if status.is_server_error() || status.as_u16() == 429 {
                EmbedError::Retryable(msg)
            } else {
                EmbedError::Fatal(msg)
            });
        }
        let parsed: EmbeddingResponse = resp.json().map_err(|e| EmbedError::Fatal(e.to_string()))?;
        if parsed.data.len() != texts.len() {
            return Err(EmbedError::Fatal(format!("expected {} embeddings, got {}", texts.len(), parsed.data.len())));
        }
        parsed
            .data
            .into_iter()
            .map(|d| {
                if d.embedding.len() != self.dim {
                    return Err(EmbedError::Fatal(format!(
                        "expected dimension {}, got {}",
                        self.dim,
                        d.embedding.len()
                    )));
                }
                Ok(FeatureVector::new(FeatureKind::Embedding, d.embedding).normalized())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn abc_lands_in_one_hand_computed_bucket() {
        // fnv1a64("abc") = 0xe71fa2190541574b, mod 256 = 0x4b = 75.
        assert_eq!(fnv1a64(b"abc"), 0xe71fa2190541574b);
        let v = TrigramHashEmbedder::new(256).embed_one("ABC");
        assert_eq!(v.values[75], 1.0);
        assert_eq!(v.values.iter().filter(|x| **x != 0.0).count(), 1);
    }

    #[test]
    fn mock_is_deterministic_and_handles_empty() {
        let e = TrigramHashEmbedder::default();
        assert!(embed_texts(&[], &e).unwrap().is_empty());
        let out = embed_texts(&["same text", "same text"], &e).unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(out[0].dim(), DEFAULT_EMBED_DIM);
        assert!((out[0].norm() - 1.0).abs() < 1e-12);
        assert!(e.embed_one("").is_zero());
    }
}
