//! Per-batch judging and cross-batch entity alignment.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::batch::Batch;
use super::AggError;
use crate::corpus::{ChunkId, Corpus};
use crate::llm::{parse_json_response, CompletionRequest, LlmClient, Message, Purpose};
use crate::prompts::{render, PromptSet};
use crate::query::QuerySpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityFinding {
    pub surface: String,
    pub canonical: String,
    pub evidence: Vec<ChunkId>,
    pub verdicts: BTreeMap<String, bool>,
    pub batch_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedFinding {
    pub batch_id: u32,
    pub surface: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JudgeOutput {
    pub findings: Vec<EntityFinding>,
    pub rejected: Vec<RejectedFinding>,
}

#[derive(Debug, Deserialize)]
struct RawFinding {
    entity: String,
    #[serde(default)]
    evidence: Vec<String>,
    #[serde(default)]
    verdicts: BTreeMap<String, bool>,
}

#[derive(Debug, Deserialize)]
struct JudgeResponse {
    findings: Vec<RawFinding>,
}

/// Alias table over canonical keys: `canonical -> preferred canonical`.
pub type AliasMap = BTreeMap<String, String>;

/// Lowercase, collapse whitespace, strip leading and trailing punctuation.
pub fn canonical_key(surface: &str) -> String {
    let lowered = surface.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.trim_matches(|c: char| !c.is_alphanumeric()).to_string()
}

fn resolve_alias(key: String, aliases: &AliasMap) -> String {
    let mut key = key;
    let mut seen = BTreeSet::new();
    while let Some(next) = aliases.get(&key) {
        if !seen.insert(key.clone()) {
            break;
        }
        key = canonical_key(next);
    }
    key
}

/// Fixture key for judge prompts: hash of the query id and the batch's
/// chunk ids in order.
pub fn judge_fixture_key(query_id: &str, chunk_ids: &[ChunkId]) -> String {
    let mut h = Sha256::new();
    h.update(query_id.as_bytes());
    for id in chunk_ids {
        h.update(b"\n");
        h.update(id.as_bytes());
    }
    format!("judge:{}", hex::encode(h.finalize()))
}

pub fn render_conditions(q: &QuerySpec) -> String {
    let mut lines: Vec<String> = q
        .conditions
        .iter()
        .map(|c| {
            if c.constraints.is_empty() {
                format!("- {}: {}", c.condition_id, c.text)
            } else {
                let notes = c.constraints.iter().map(|k| k.note.as_str()).collect::<Vec<_>>().join("; ");
                format!("- {}: {} ({})", c.condition_id, c.text, notes)
            }
        })
        .collect();
    for note in &q.scope_notes {
        lines.push(format!("- scope: {}", note.note));
    }
    lines.join("\n")
}

pub fn render_judge_prompt(
    q: &QuerySpec,
    corpus: &Corpus,
    chunk_ids: &[ChunkId],
    prompts: &PromptSet,
) -> Result<String, AggError> {
    let chunks = corpus.get_chunks(chunk_ids).map_err(|e| AggError::UnknownChunk(e.to_string()))?;
    let body = chunks.iter().map(|c| format!("[{}] {}", c.chunk_id, c.text)).collect::<Vec<_>>().join("\n");
    Ok(render(
        &prompts.judge,
        &[
            ("entity_type", &q.entity_type),
            ("question", &q.raw_text),
            ("conditions", &render_conditions(q)),
            ("chunks", &body),
        ],
    )?)
}

/// Judge one batch. Findings citing chunks outside the batch, or no chunk at
/// all, are rejected and logged. Verdicts for unknown conditions are dropped
/// and missing verdicts count as false.
pub fn judge_batch(
    batch: &Batch,
    q: &QuerySpec,
    corpus: &Corpus,
    client: &LlmClient,
    prompts: &PromptSet,
) -> Result<JudgeOutput, AggError> {
    let ids = batch.chunk_ids();
    let prompt = render_judge_prompt(q, corpus, &ids, prompts)?;
    let req = CompletionRequest::new(Purpose::Judge, vec![Message::system(&prompts.system), Message::user(prompt)])
        .with_fixture_key(judge_fixture_key(&q.query_id, &ids));
    if let Some(limit) = client.context_limit() {
        let needed = req.prompt_tokens() as usize + req.max_output_tokens as usize;
        if needed > limit {
            return Err(AggError::ContextOverflow { batch_id: batch.batch_id, tokens: needed, limit });
        }
    }
    let completion = client.complete(&req)?;
    let parsed: JudgeResponse = parse_json_response(&completion.text).map_err(|reason| AggError::MalformedJudge {
        batch_id: batch.batch_id,
        reason,
        raw: completion.text.clone(),
    })?;
    let members: BTreeSet<&ChunkId> = ids.iter().collect();
    let known = q.condition_ids();
    let mut out = JudgeOutput::default();
    for raw in parsed.findings {
        let reject = |reason: String| RejectedFinding { batch_id: batch.batch_id, surface: raw.entity.clone(), reason };
        let canonical = canonical_key(&raw.entity);
        if canonical.is_empty() {
            out.rejected.push(reject("empty entity name".into()));
            continue;
        }
        if raw.evidence.is_empty() {
            out.rejected.push(reject("no supporting chunk".into()));
            continue;
        }
        if let Some(foreign) = raw.evidence.iter().find(|id| !members.contains(id)) {
            log::warn!("batch {}: finding {:?} cites chunk {foreign} outside the batch", batch.batch_id, raw.entity);
            out.rejected.push(reject(format!("cites chunk {foreign} outside the batch")));
            continue;
        }
        let mut verdicts: BTreeMap<String, bool> = known.iter().map(|c| (c.to_string(), false)).collect();
        for (cid, v) in &raw.verdicts {
            if known.contains(cid.as_str()) {
                verdicts.insert(cid.clone(), *v);
            } else {
                log::warn!("batch {}: dropping verdict for unknown condition {cid}", batch.batch_id);
            }
        }
        let evidence: BTreeSet<ChunkId> = raw.evidence.into_iter().collect();
        out.findings.push(EntityFinding {
            surface: raw.entity,
            canonical,
            evidence: evidence.into_iter().collect(),
            verdicts,
            batch_id: batch.batch_id,
        });
    }
    Ok(out)
}

/// Judge batches on up to `client.max_parallel()` threads. Output order
/// follows batch order regardless of completion order.
pub fn judge_batches(
    batches: &[Batch],
    q: &QuerySpec,
    corpus: &Corpus,
    client: &LlmClient,
    prompts: &PromptSet,
) -> Result<Vec<JudgeOutput>, AggError> {
    let workers = client.max_parallel().max(1).min(batches.len().max(1));
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<JudgeOutput, AggError>>> = (0..batches.len()).map(|_| None).collect();
    let results: Vec<Vec<(usize, Result<JudgeOutput, AggError>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut mine = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= batches.len() {
                            break;
                        }
                        mine.push((i, judge_batch(&batches[i], q, corpus, client, prompts)));
                    }
                    mine
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("judge worker panicked")).collect()
    });
    for (i, r) in results.into_iter().flatten() {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|r| r.expect("every batch judged")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerEntity {
    pub canonical: String,
    pub surfaces: Vec<String>,
    pub evidence_chunk_ids: Vec<ChunkId>,
    pub verdicts: BTreeMap<String, bool>,
}

/// Merge findings by canonical key. A condition holds for an entity when any
/// finding says so; the entity is kept when the merged verdicts satisfy the
/// query's composition. Entities come out sorted by canonical key.
pub fn align_findings(findings: &[EntityFinding], q: &QuerySpec, aliases: &AliasMap) -> Vec<AnswerEntity> {
    struct Acc {
        surfaces: BTreeSet<String>,
        evidence: BTreeSet<ChunkId>,
        verdicts: BTreeMap<String, bool>,
    }
    let mut merged: BTreeMap<String, Acc> = BTreeMap::new();
    for f in findings {
        let key = resolve_alias(f.canonical.clone(), aliases);
        let acc = merged.entry(key).or_insert_with(|| Acc {
            surfaces: BTreeSet::new(),
            evidence: BTreeSet::new(),
            verdicts: q.condition_ids().into_iter().map(|c| (c.to_string(), false)).collect(),
        });
        acc.surfaces.insert(f.surface.clone());
        acc.evidence.extend(f.evidence.iter().cloned());
        for (c, v) in &f.verdicts {
            if *v {
                acc.verdicts.insert(c.clone(), true);
            }
        }
    }
    merged
        .into_iter()
        .filter(|(_, acc)| q.composition.evaluate(&acc.verdicts))
        .map(|(canonical, acc)| AnswerEntity {
            canonical,
            surfaces: acc.surfaces.into_iter().collect(),
            evidence_chunk_ids: acc.evidence.into_iter().collect(),
            verdicts: acc.verdicts,
        })
        .collect()
}

/// Candidate pairs from judge output: per canonical entity, the number of
/// pairs of distinct batches that reported it.
pub fn finding_candidate_pairs(findings: &[EntityFinding]) -> usize {
    let mut spread: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
    for f in findings {
        spread.entry(f.canonical.as_str()).or_default().insert(f.batch_id);
    }
    spread.values().map(|s| s.len() * s.len().saturating_sub(1) / 2).sum()
}
