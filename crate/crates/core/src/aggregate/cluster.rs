//! Chunk features and offline clustering.
//!
//! Each chunk gets an L2-normalized TF-IDF vector (fitted on the candidate
//! set) and an embedding. Similarity is the weighted sum of the two cosines.
//! The combined vector concatenates the parts scaled by `sqrt(weight)`, so
//! its cosine equals the weighted similarity whenever both parts are
//! non-zero; cluster and batch centroids live in that combined space.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AggError;
use crate::corpus::{ChunkId, Corpus};
use crate::index::{cosine_sim, tfidf_features, EmbeddingProvider, FeatureKind, FeatureVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeights {
    pub tfidf: f64,
    pub embedding: f64,
}

impl Default for FeatureWeights {
    fn default() -> Self {
        Self { tfidf: 0.5, embedding: 0.5 }
    }
}

impl FeatureWeights {
    pub fn validate(&self) -> Result<(), AggError> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(self.tfidf) || !ok(self.embedding) || self.tfidf + self.embedding <= 0.0 {
            return Err(AggError::InvalidParams(format!("bad feature weights {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkFeatures {
    pub tfidf: FeatureVector,
    pub embedding: FeatureVector,
}

#[derive(Debug, Clone)]
pub struct FeatureSet {
    weights: FeatureWeights,
    by_chunk: BTreeMap<ChunkId, ChunkFeatures>,
}

impl FeatureSet {
    pub fn build(
        corpus: &Corpus,
        chunk_ids: &[ChunkId],
        embedder: &dyn EmbeddingProvider,
        weights: FeatureWeights,
    ) -> Result<Self, AggError> {
        weights.validate()?;
        let chunks = corpus.get_chunks(chunk_ids).map_err(|e| AggError::UnknownChunk(e.to_string()))?;
        let mut tfidf = tfidf_features(&chunks);
        let texts: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        let embeddings = if texts.is_empty() { Vec::new() } else { embedder.embed(&texts).map_err(AggError::Embed)? };
        let by_chunk = chunks
            .iter()
            .zip(embeddings)
            .map(|(c, e)| {
                let t = tfidf.remove(&c.chunk_id).expect("tfidf row per chunk");
                (c.chunk_id.clone(), ChunkFeatures { tfidf: t, embedding: e.normalized() })
            })
            .collect();
        Ok(Self { weights, by_chunk })
    }

    pub fn weights(&self) -> FeatureWeights {
        self.weights
    }

    pub fn get(&self, id: &str) -> Option<&ChunkFeatures> {
        self.by_chunk.get(id)
    }

    /// Weighted cosine of two chunks, normalized by the weight total.
    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        let (fa, fb) = (&self.by_chunk[a], &self.by_chunk[b]);
        let w = self.weights;
        (w.tfidf * cosine_sim(&fa.tfidf.values, &fb.tfidf.values)
            + w.embedding * cosine_sim(&fa.embedding.values, &fb.embedding.values))
            / (w.tfidf + w.embedding)
    }

    pub fn combined(&self, id: &str) -> FeatureVector {
        let f = &self.by_chunk[id];
        let total = self.weights.tfidf + self.weights.embedding;
        let st = (self.weights.tfidf / total).sqrt();
        let se = (self.weights.embedding / total).sqrt();
        let values = f.tfidf.values.iter().map(|v| v * st).chain(f.embedding.values.iter().map(|v| v * se)).collect();
        FeatureVector::new(FeatureKind::Combined, values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMember {
    pub chunk_id: ChunkId,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub cluster_id: u32,
    /// Piece index when this is part of a split cluster.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part: Option<u32>,
    pub members: Vec<ClusterMember>,
    pub centroid: Vec<f64>,
    pub tokens: usize,
}

impl Cluster {
    pub fn new(cluster_id: u32, members: Vec<ClusterMember>, centroid: Vec<f64>) -> Self {
        let tokens = members.iter().map(|m| m.tokens).sum();
        Self { cluster_id, part: None, members, centroid, tokens }
    }

    pub fn chunk_ids(&self) -> impl Iterator<Item = &ChunkId> {
        self.members.iter().map(|m| &m.chunk_id)
    }

    pub fn label(&self) -> String {
        match self.part {
            Some(p) => format!("K{}.{}", self.cluster_id, p),
            None => format!("K{}", self.cluster_id),
        }
    }
}

/// Single-link threshold clustering over items `0..n`: items are linked when
/// `sim(i, j) >= threshold`, clusters are the connected components. Each
/// component lists its items ascending; components are ordered by their
/// smallest item.
pub fn single_link_clusters(n: usize, threshold: f64, sim: impl Fn(usize, usize) -> f64) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if sim(i, j) >= threshold {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|g| g[0]);
    out
}

/// Token-weighted mean of member vectors.
pub fn token_weighted_centroid(vectors: &[(&[f64], usize)]) -> Vec<f64> {
    let dim = vectors.first().map(|(v, _)| v.len()).unwrap_or(0);
    let total: usize = vectors.iter().map(|(_, t)| t).sum();
    let mut out = vec![0.0; dim];
    if total == 0 {
        return out;
    }
    for (v, t) in vectors {
        let w = *t as f64 / total as f64;
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    out
}

/// Cluster candidate chunks. With `threshold` above 1 every chunk stays a
/// singleton (clustering disabled).
pub fn cluster_candidates(
    corpus: &Corpus,
    candidates: &[ChunkId],
    features: &FeatureSet,
    threshold: f64,
) -> Result<Vec<Cluster>, AggError> {
    if candidates.is_empty() {
        return Err(AggError::EmptyCandidates);
    }
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(AggError::InvalidParams(format!("cluster threshold {threshold} must be positive")));
    }
    let chunks = corpus.get_chunks(candidates).map_err(|e| AggError::UnknownChunk(e.to_string()))?;
    let groups = single_link_clusters(chunks.len(), threshold, |i, j| {
        features.similarity(&chunks[i].chunk_id, &chunks[j].chunk_id)
    });
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(cid, group)| {
            let combined: Vec<FeatureVector> = group.iter().map(|&i| features.combined(&chunks[i].chunk_id)).collect();
            let weighted: Vec<(&[f64], usize)> =
                combined.iter().zip(&group).map(|(v, &i)| (v.values.as_slice(), chunks[i].token_count)).collect();
            let centroid = token_weighted_centroid(&weighted);
            let members = group
                .iter()
                .map(|&i| ClusterMember { chunk_id: chunks[i].chunk_id.clone(), tokens: chunks[i].token_count })
                .collect();
            Cluster::new(cid as u32, members, centroid)
        })
        .collect())
}
