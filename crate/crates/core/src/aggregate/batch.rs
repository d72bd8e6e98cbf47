//! Greedy cluster batching and the baselines it is compared against.
//!
//! Merge score of cluster `K` into batch `B` under context size `M`:
//!
//! S(K, B) = λ·cos(μ_K, μ̄(B)) + (1 − λ)·(T(B) + T(K)) / M
//!
//! After a merge the batch centroid becomes the token-weighted mean
//! (T(B)·μ̄(B) + T(K)·μ_K) / (T(B) + T(K)).

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cluster::{Cluster, ClusterMember};
use super::AggError;
use crate::corpus::ChunkId;
use crate::index::{cosine_sim, weighted_mean};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub batch_id: u32,
    pub clusters: Vec<Cluster>,
    pub centroid: Vec<f64>,
    pub tokens: usize,
}

impl Batch {
    fn open(batch_id: u32, cluster: Cluster) -> Self {
        Self { batch_id, centroid: cluster.centroid.clone(), tokens: cluster.tokens, clusters: vec![cluster] }
    }

    fn absorb(&mut self, cluster: Cluster) {
        self.centroid = weighted_mean(&self.centroid, self.tokens as f64, &cluster.centroid, cluster.tokens as f64);
        self.tokens += cluster.tokens;
        self.clusters.push(cluster);
    }

    pub fn chunk_ids(&self) -> Vec<ChunkId> {
        self.clusters.iter().flat_map(|c| c.chunk_ids().cloned()).collect()
    }
}

/// Cut a cluster into consecutive pieces of at most `max_tokens`, keeping
/// member order. A cluster that already fits is returned unchanged.
pub fn split_cluster(cluster: &Cluster, max_tokens: usize) -> Result<Vec<Cluster>, AggError> {
    if cluster.members.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(m) = cluster.members.iter().find(|m| m.tokens > max_tokens) {
        return Err(AggError::ChunkTooLarge { chunk_id: m.chunk_id.clone(), tokens: m.tokens, max: max_tokens });
    }
    if cluster.tokens <= max_tokens {
        return Ok(vec![cluster.clone()]);
    }
    let mut pieces: Vec<Vec<ClusterMember>> = vec![Vec::new()];
    let mut used = 0;
    for m in &cluster.members {
        if used + m.tokens > max_tokens {
            pieces.push(Vec::new());
            used = 0;
        }
        used += m.tokens;
        pieces.last_mut().expect("non-empty").push(m.clone());
    }
    Ok(pieces
        .into_iter()
        .enumerate()
        .map(|(i, members)| {
            let mut piece = Cluster::new(cluster.cluster_id, members, cluster.centroid.clone());
            piece.part = Some(i as u32);
            piece
        })
        .collect())
}

pub fn merge_score(centroid: &[f64], cluster_tokens: usize, batch: &Batch, lambda: f64, max_tokens: usize) -> f64 {
    lambda * cosine_sim(centroid, &batch.centroid)
        + (1.0 - lambda) * (batch.tokens + cluster_tokens) as f64 / max_tokens as f64
}

fn check_params(max_tokens: usize, lambda: f64) -> Result<(), AggError> {
    if max_tokens == 0 {
        return Err(AggError::InvalidParams("max context must be positive".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(AggError::InvalidParams(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// Descending token total, ties by cluster id.
pub fn insertion_order(clusters: &[Cluster]) -> Vec<Cluster> {
    let mut out = clusters.to_vec();
    out.sort_by(|a, b| b.tokens.cmp(&a.tokens).then(a.cluster_id.cmp(&b.cluster_id)).then(a.part.cmp(&b.part)));
    out
}

/// Greedy semantic batching over clusters in the given order. Oversized
/// clusters are split and each piece opens its own batch; other clusters
/// join the feasible batch with the highest merge score (lowest index on
/// ties) or open a new batch when none fits.
pub fn greedy_batch(clusters: &[Cluster], max_tokens: usize, lambda: f64) -> Result<Vec<Batch>, AggError> {
    check_params(max_tokens, lambda)?;
    let mut batches: Vec<Batch> = Vec::new();
    for k in clusters {
        if k.members.is_empty() {
            continue;
        }
        if k.tokens > max_tokens {
            for piece in split_cluster(k, max_tokens)? {
                let id = batches.len() as u32;
                batches.push(Batch::open(id, piece));
            }
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, b) in batches.iter().enumerate() {
            if b.tokens + k.tokens <= max_tokens {
                let s = merge_score(&k.centroid, k.tokens, b, lambda, max_tokens);
                if best.is_none_or(|(_, bs)| s > bs) {
                    best = Some((i, s));
                }
            }
        }
        match best {
            Some((i, _)) => batches[i].absorb(k.clone()),
            None => {
                let id = batches.len() as u32;
                batches.push(Batch::open(id, k.clone()));
            }
        }
    }
    Ok(batches)
}

/// Baseline without merging: every cluster (or split piece) is its own batch.
pub fn unmerged_batches(clusters: &[Cluster], max_tokens: usize) -> Result<Vec<Batch>, AggError> {
    check_params(max_tokens, 0.0)?;
    let mut batches = Vec::new();
    for k in clusters {
        for piece in split_cluster(k, max_tokens)? {
            let id = batches.len() as u32;
            batches.push(Batch::open(id, piece));
        }
    }
    Ok(batches)
}

/// Baseline ignoring semantics: shuffle the chunks with a seeded RNG and pack
/// them in that order, opening a new batch whenever the next chunk does not fit.
pub fn random_batches(clusters: &[Cluster], max_tokens: usize, seed: u64) -> Result<Vec<Batch>, AggError> {
    check_params(max_tokens, 0.0)?;
    let mut singles: Vec<Cluster> = Vec::new();
    for k in clusters {
        for m in &k.members {
            if m.tokens > max_tokens {
                return Err(AggError::ChunkTooLarge {
                    chunk_id: m.chunk_id.clone(),
                    tokens: m.tokens,
                    max: max_tokens,
                });
            }
            singles.push(Cluster::new(k.cluster_id, vec![m.clone()], k.centroid.clone()));
        }
    }
    singles.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut batches: Vec<Batch> = Vec::new();
    for s in singles {
        match batches.last_mut() {
            Some(b) if b.tokens + s.tokens <= max_tokens => b.absorb(s),
            _ => {
                let id = batches.len() as u32;
                batches.push(Batch::open(id, s));
            }
        }
    }
    Ok(batches)
}

/// Candidate pairs: for every entity, the number of batch pairs that both
/// mention it and therefore have to be aligned, summed over entities.
/// `mentions` maps a chunk to the entity keys it mentions.
pub fn candidate_pairs(batches: &[Batch], mentions: &BTreeMap<ChunkId, BTreeSet<String>>) -> usize {
    let mut spread: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
    for b in batches {
        for id in b.chunk_ids() {
            if let Some(entities) = mentions.get(&id) {
                for e in entities {
                    spread.entry(e.as_str()).or_default().insert(b.batch_id);
                }
            }
        }
    }
    spread.values().map(|s| s.len() * s.len().saturating_sub(1) / 2).sum()
}
