//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, LazyLock};

use aggquery_core::aggregate::{AnswerEntity, Cluster};
use aggquery_core::llm::{FnBackend, LlmBackend, LlmClient, LlmError, Purpose, RetryPolicy};
use aggquery_core::{ChunkPolicy, Composition, Condition, Corpus, Document, QuerySpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde_json::json;

static CHUNK_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^\[([^\]\s]+)\] (.*)$").unwrap());
static FACT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b([A-Za-z]+[0-9]+) (has feature (alpha|beta)|was mentioned in passing)").unwrap());

/// What the scripted judge reads out of one chunk: (surface, alpha, beta).
pub fn read_chunk(text: &str) -> Vec<(String, bool, bool)> {
    FACT.captures_iter(text)
        .map(|c| {
            let kind = c.get(3).map(|m| m.as_str());
            (c[1].to_string(), kind == Some("alpha"), kind == Some("beta"))
        })
        .collect()
}

/// Judge response for a prompt: every chunk line is read on its own.
pub fn judge_response(prompt: &str) -> String {
    let mut findings = Vec::new();
    for line in CHUNK_LINE.captures_iter(prompt) {
        let id = &line[1];
        for (entity, alpha, beta) in read_chunk(&line[2]) {
            findings.push(json!({"entity": entity, "evidence": [id], "verdicts": {"c1": alpha, "c2": beta}}));
        }
    }
    json!({ "findings": findings }).to_string()
}

/// Backend that judges chunk by chunk and answers probes with "nothing relevant".
pub fn per_chunk_judge() -> Arc<dyn LlmBackend> {
    Arc::new(FnBackend::new("per-chunk-judge", |req| match req.purpose {
        Purpose::Judge => Ok(judge_response(&req.prompt_text())),
        Purpose::Probe => Ok(r#"{"relevant": []}"#.to_string()),
        other => Err(LlmError::Backend(format!("no fixture for {other}"))),
    }))
}

pub fn client(backend: Arc<dyn LlmBackend>) -> LlmClient {
    LlmClient::new(backend).with_retry(RetryPolicy::none())
}

pub fn two_conditions(query_id: &str, composition: Composition) -> QuerySpec {
    QuerySpec::new(
        query_id,
        "Which entities have feature alpha or beta?",
        "entity",
        vec![Condition::new("c1", "has feature alpha"), Condition::new("c2", "has feature beta")],
        composition,
    )
    .unwrap()
}

/// Seeded synthetic corpus of fact sentences about entities `EntN`, with
/// random name casing so that deduplication matters.
pub fn synthetic_corpus(seed: u64, docs: usize, policy: ChunkPolicy) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fillers = ["The report continues here.", "Further notes follow.", "Background text without facts."];
    let documents: Vec<Document> = (0..docs)
        .map(|d| {
            let sentences: Vec<String> = (0..rng.random_range(2..6))
                .map(|_| {
                    let e = rng.random_range(0..8);
                    let name = match rng.random_range(0..3) {
                        0 => format!("Ent{e}"),
                        1 => format!("ENT{e}"),
                        _ => format!("ent{e}"),
                    };
                    match rng.random_range(0..4) {
                        0 => format!("{name} has feature alpha."),
                        1 => format!("{name} has feature beta."),
                        2 => format!("{name} was mentioned in passing."),
                        _ => fillers[rng.random_range(0..fillers.len())].to_string(),
                    }
                })
                .collect();
            Document::new(format!("doc{d:02}"), sentences.join(" "))
        })
        .collect();
    Corpus::ingest(format!("synthetic-{seed}"), &documents, policy).unwrap()
}

/// Per-chunk union: read every chunk independently, merge by lowercase
/// name, OR the verdicts, keep entities satisfying the composition.
pub fn chunk_union_oracle(corpus: &Corpus, q: &QuerySpec) -> Vec<AnswerEntity> {
    #[derive(Default)]
    struct Acc {
        surfaces: BTreeSet<String>,
        evidence: BTreeSet<String>,
        alpha: bool,
        beta: bool,
    }
    let mut by_entity: BTreeMap<String, Acc> = BTreeMap::new();
    for chunk in corpus.chunks() {
        for (surface, alpha, beta) in read_chunk(&chunk.text) {
            let acc = by_entity.entry(surface.to_lowercase()).or_default();
            acc.surfaces.insert(surface);
            acc.evidence.insert(chunk.chunk_id.clone());
            acc.alpha |= alpha;
            acc.beta |= beta;
        }
    }
    by_entity
        .into_iter()
        .filter_map(|(key, acc)| {
            let verdicts: BTreeMap<String, bool> =
                [("c1".to_string(), acc.alpha), ("c2".to_string(), acc.beta)].into_iter().collect();
            let keep = match &q.composition {
                Composition::Leaf(c) => verdicts[c],
                Composition::And(_) => acc.alpha && acc.beta,
                Composition::Or(_) => acc.alpha || acc.beta,
            };
            keep.then(|| AnswerEntity {
                canonical: key,
                surfaces: acc.surfaces.into_iter().collect(),
                evidence_chunk_ids: acc.evidence.into_iter().collect(),
                verdicts,
            })
        })
        .collect()
}

/// Okapi BM25 written out term by term: idf = ln(1 + (N - n + 0.5)/(n + 0.5)),
/// each distinct query term counted once.
pub fn textbook_bm25(docs: &[(&str, &str)], query: &str, k1: f64, b: f64) -> BTreeMap<String, f64> {
    fn terms(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = String::new();
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                cur.extend(ch.to_lowercase());
            } else if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }
    let tokenized: Vec<(String, Vec<String>)> = docs.iter().map(|(id, t)| (id.to_string(), terms(t))).collect();
    let n = tokenized.len() as f64;
    let avgdl = tokenized.iter().map(|(_, t)| t.len() as f64).sum::<f64>() / n;
    let qterms: BTreeSet<String> = terms(query).into_iter().collect();
    tokenized
        .iter()
        .map(|(id, toks)| {
            let dl = toks.len() as f64;
            let mut score = 0.0;
            for q in &qterms {
                let df = tokenized.iter().filter(|(_, t)| t.contains(q)).count() as f64;
                let tf = toks.iter().filter(|t| *t == q).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
            }
            (id.clone(), score)
        })
        .collect()
}

/// One batch as recorded by the replayer: (cluster id, piece, member ids).
pub type ReplayBatch = Vec<(u32, Option<u32>, Vec<String>)>;

/// Greedy cluster batching re-coded from its pseudocode. Returns batch
/// memberships and the running centroids.
pub fn replay_greedy_batching(clusters: &[Cluster], m: usize, lambda: f64) -> (Vec<ReplayBatch>, Vec<Vec<f64>>) {
    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            (dot / (na * nb)).clamp(-1.0, 1.0)
        }
    }
    let mut members: Vec<ReplayBatch> = Vec::new();
    let mut centroids: Vec<Vec<f64>> = Vec::new();
    let mut totals: Vec<usize> = Vec::new();
    for k in clusters {
        let t_k: usize = k.members.iter().map(|x| x.tokens).sum();
        if t_k == 0 && k.members.is_empty() {
            continue;
        }
        if t_k > m {
            let mut piece: Vec<String> = Vec::new();
            let mut used = 0;
            let mut part = 0u32;
            for x in &k.members {
                if used + x.tokens > m {
                    members.push(vec![(k.cluster_id, Some(part), std::mem::take(&mut piece))]);
                    centroids.push(k.centroid.clone());
                    totals.push(used);
                    part += 1;
                    used = 0;
                }
                piece.push(x.chunk_id.clone());
                used += x.tokens;
            }
            members.push(vec![(k.cluster_id, Some(part), piece)]);
            centroids.push(k.centroid.clone());
            totals.push(used);
            continue;
        }
        let mut best: Option<usize> = None;
        let mut best_score = f64::NEG_INFINITY;
        for q in 0..members.len() {
            if totals[q] + t_k <= m {
                let s = lambda * cos(&k.centroid, &centroids[q]) + (1.0 - lambda) * (totals[q] + t_k) as f64 / m as f64;
                if s > best_score {
                    best_score = s;
                    best = Some(q);
                }
            }
        }
        let ids: Vec<String> = k.members.iter().map(|x| x.chunk_id.clone()).collect();
        match best {
            Some(q) => {
                let (tb, tk) = (totals[q] as f64, t_k as f64);
                centroids[q] =
                    centroids[q].iter().zip(&k.centroid).map(|(b, c)| (tb * b + tk * c) / (tb + tk)).collect();
                totals[q] += t_k;
                members[q].push((k.cluster_id, None, ids));
            }
            None => {
                members.push(vec![(k.cluster_id, None, ids)]);
                centroids.push(k.centroid.clone());
                totals.push(t_k);
            }
        }
    }
    (members, centroids)
}

/// Random clusters for replay: token counts up to `m`, some clusters
/// oversized so that splitting happens.
pub fn random_clusters(rng: &mut ChaCha8Rng, count: usize, dim: usize, m: usize) -> Vec<Cluster> {
    use aggquery_core::aggregate::ClusterMember;
    (0..count)
        .map(|cid| {
            let n_members = rng.random_range(1..6);
            let members = (0..n_members)
                .map(|i| ClusterMember { chunk_id: format!("k{cid}#{i:05}"), tokens: rng.random_range(1..=m / 2) })
                .collect();
            let centroid: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            Cluster::new(cid as u32, members, centroid)
        })
        .collect()
}

/// Levenshtein distance by the full dynamic-programming table.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
        }
    }
    d[a.len()][b.len()]
}

/// Per-chunk judge plus planner responses keyed by fixture key
/// (`plan:<query id>:<iteration>`).
pub fn judge_with_plans(plans: Vec<(&str, serde_json::Value)>) -> Arc<dyn LlmBackend> {
    let plans: BTreeMap<String, String> = plans.into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    Arc::new(FnBackend::new("judge-with-plans", move |req| match req.purpose {
        Purpose::Judge => Ok(judge_response(&req.prompt_text())),
        Purpose::Probe => Ok(r#"{"relevant": []}"#.to_string()),
        Purpose::Plan => {
            let key = req.fixture_key.clone().unwrap_or_default();
            plans.get(&key).cloned().ok_or_else(|| LlmError::Backend(format!("no plan for {key}")))
        }
        other => Err(LlmError::Backend(format!("no fixture for {other}"))),
    }))
}
