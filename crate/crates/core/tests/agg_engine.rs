mod common;

use std::sync::Arc;

use aggquery_core::aggregate::{single_link_clusters, AggError, AggregateConfig, Aggregator, AliasMap, BatchingMode};
use aggquery_core::filter::CandidateSet;
use aggquery_core::llm::{FnBackend, LlmError, Purpose, ScriptKey, ScriptedBackend};
use aggquery_core::prompts::PromptSet;
use aggquery_core::{ChunkPolicy, Composition, Corpus, Document};
use common::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn candidates(corpus: &Corpus) -> CandidateSet {
    CandidateSet {
        query_id: "q".into(),
        snapshot_id: 0,
        chunk_ids: corpus.chunk_ids().cloned().collect(),
        trail: vec![],
    }
}

#[test]
fn single_link_on_hand_matrix() {
    let s = [
        [1.0, 0.9, 0.1, 0.0, 0.0],
        [0.9, 1.0, 0.7, 0.0, 0.0],
        [0.1, 0.7, 1.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0, 0.5],
        [0.0, 0.0, 0.0, 0.5, 1.0],
    ];
    // 0-1 and 1-2 link at 0.6 even though 0-2 is far apart
    assert_eq!(single_link_clusters(5, 0.6, |i, j| s[i][j]), vec![vec![0, 1, 2], vec![3], vec![4]]);
    assert_eq!(single_link_clusters(5, 0.5, |i, j| s[i][j]), vec![vec![0, 1, 2], vec![3, 4]]);
    assert_eq!(single_link_clusters(5, 0.95, |i, j| s[i][j]).len(), 5);
}

#[test]
fn identical_chunks_share_a_cluster() {
    let docs = vec![
        Document::new("a", "Ent1 has feature alpha in the lab."),
        Document::new("b", "Ent1 has feature alpha in the lab."),
        Document::new("c", "Quarterly river flooding statistics by region."),
    ];
    let corpus = Corpus::ingest("twins", &docs, ChunkPolicy::default()).unwrap();
    let c = client(per_chunk_judge());
    let prompts = PromptSet::builtin();
    let agg = Aggregator::new(&corpus, &c, &prompts, AggregateConfig::default());
    let ids: Vec<String> = corpus.chunk_ids().cloned().collect();
    let (clusters, batches) = agg.plan_batches(&ids).unwrap();
    let sizes: Vec<usize> = clusters.iter().map(|k| k.members.len()).collect();
    assert_eq!(sizes, vec![2, 1]);
    assert_eq!(batches.len(), 1);
}

#[test]
fn three_chunk_toy_dedups_across_surfaces() {
    let docs = vec![
        Document::new("a", "Ent1 has feature alpha."),
        Document::new("b", "ENT1 has feature beta. Ent2 has feature alpha."),
        Document::new("c", "ent3 was mentioned in passing."),
    ];
    let corpus = Corpus::ingest("toy", &docs, ChunkPolicy::default()).unwrap();
    let c = client(per_chunk_judge());
    let prompts = PromptSet::builtin();
    // one chunk per batch so that findings have to be merged across batches
    let cfg = AggregateConfig { max_context: 12, prompt_overhead: 4, clustering: false, ..AggregateConfig::default() };
    let q = two_conditions("q", Composition::and_of(["c1", "c2"]));
    let run = Aggregator::new(&corpus, &c, &prompts, cfg.clone()).run(&q, &candidates(&corpus)).unwrap();
    assert_eq!(run.batches.len(), 3);
    assert_eq!(run.answer.canonical_names(), vec!["ent1"]);
    let e = &run.answer.entities[0];
    assert_eq!(e.surfaces, vec!["ENT1", "Ent1"]);
    assert_eq!(e.evidence_chunk_ids, vec!["a#00000", "b#00000"]);
    assert_eq!(run.answer.stats.candidate_pairs, 1);

    let q_or = two_conditions("q", Composition::or_of(["c1", "c2"]));
    let run = Aggregator::new(&corpus, &c, &prompts, cfg).run(&q_or, &candidates(&corpus)).unwrap();
    assert_eq!(run.answer.count, 2);
}

#[test]
fn aliases_merge_entities() {
    let docs = vec![Document::new("a", "Ent1 has feature alpha."), Document::new("b", "Ent9 has feature alpha.")];
    let corpus = Corpus::ingest("alias", &docs, ChunkPolicy::default()).unwrap();
    let c = client(per_chunk_judge());
    let prompts = PromptSet::builtin();
    let q = two_conditions("q", Composition::Leaf("c1".into()));
    let aliases = AliasMap::from([("ent9".to_string(), "Ent1".to_string())]);
    let run = Aggregator::new(&corpus, &c, &prompts, AggregateConfig::default())
        .with_aliases(aliases)
        .run(&q, &candidates(&corpus))
        .unwrap();
    assert_eq!(run.answer.count, 1);
    assert_eq!(run.answer.entities[0].surfaces, vec!["Ent1", "Ent9"]);
}

#[test]
fn findings_citing_foreign_chunks_are_rejected() {
    let docs = vec![Document::new("a", "Ent1 has feature alpha.")];
    let corpus = Corpus::ingest("foreign", &docs, ChunkPolicy::default()).unwrap();
    let backend = Arc::new(FnBackend::new("liar", |req| match req.purpose {
        Purpose::Judge => Ok(json!({"findings": [
            {"entity": "Ent1", "evidence": ["a#00000"], "verdicts": {"c1": true}},
            {"entity": "Ghost", "evidence": ["zzz#00000"], "verdicts": {"c1": true}},
            {"entity": "Nobody", "evidence": [], "verdicts": {"c1": true}}
        ]})
        .to_string()),
        other => Err(LlmError::Backend(format!("unexpected {other}"))),
    }));
    let c = client(backend);
    let prompts = PromptSet::builtin();
    let q = two_conditions("q", Composition::Leaf("c1".into()));
    let run = Aggregator::new(&corpus, &c, &prompts, AggregateConfig::default()).run(&q, &candidates(&corpus)).unwrap();
    assert_eq!(run.answer.canonical_names(), vec!["ent1"]);
    let rejected: Vec<&str> = run.answer.stats.rejected.iter().map(|r| r.surface.as_str()).collect();
    assert_eq!(rejected, vec!["Ghost", "Nobody"]);
}

#[test]
fn malformed_judge_output_is_an_error() {
    let docs = vec![Document::new("a", "Ent1 has feature alpha.")];
    let corpus = Corpus::ingest("bad", &docs, ChunkPolicy::default()).unwrap();
    let c = client(Arc::new(FnBackend::new("prose", |_| Ok("Ent1 qualifies.".into()))));
    let prompts = PromptSet::builtin();
    let q = two_conditions("q", Composition::Leaf("c1".into()));
    let err =
        Aggregator::new(&corpus, &c, &prompts, AggregateConfig::default()).run(&q, &candidates(&corpus)).unwrap_err();
    assert!(matches!(err, AggError::MalformedJudge { batch_id: 0, .. }), "{err}");
}

#[test]
fn context_overflow_is_reported_before_calling() {
    let docs = vec![Document::new("a", "Ent1 has feature alpha. ".repeat(40))];
    let corpus = Corpus::ingest("big", &docs, ChunkPolicy::default()).unwrap();
    let backend = Arc::new(ScriptedBackend::new().with_context_limit(50));
    let c = client(backend);
    let prompts = PromptSet::builtin();
    let q = two_conditions("q", Composition::Leaf("c1".into()));
    let err =
        Aggregator::new(&corpus, &c, &prompts, AggregateConfig::default()).run(&q, &candidates(&corpus)).unwrap_err();
    assert!(matches!(err, AggError::ContextOverflow { limit: 50, .. }), "{err}");
    assert_eq!(c.ledger().snapshot().total.calls, 0);
}

#[test]
fn scripted_fixture_drives_the_judge() {
    let docs = vec![Document::new("a", "Ent1 has feature alpha.")];
    let corpus = Corpus::ingest("fixture", &docs, ChunkPolicy::default()).unwrap();
    let q = two_conditions("q", Composition::Leaf("c1".into()));
    let key = aggquery_core::aggregate::judge_fixture_key("q", &["a#00000".to_string()]);
    let backend = ScriptedBackend::new();
    backend
        .register_script(
            ScriptKey::Fixture(key),
            json!({"findings": [{"entity": "Ent1", "evidence": ["a#00000"], "verdicts": {"c1": true}}]}).to_string(),
        )
        .unwrap();
    let c = client(Arc::new(backend));
    let prompts = PromptSet::builtin();
    let run = Aggregator::new(&corpus, &c, &prompts, AggregateConfig::default()).run(&q, &candidates(&corpus)).unwrap();
    assert_eq!(run.answer.count, 1);
}

#[test]
fn answer_is_invariant_to_candidate_order() {
    let policy = ChunkPolicy::new(16, 2).unwrap();
    let corpus = synthetic_corpus(5, 12, policy);
    let q = two_conditions("q", Composition::or_of(["c1", "c2"]));
    let c = client(per_chunk_judge());
    let prompts = PromptSet::builtin();
    let oracle = chunk_union_oracle(&corpus, &q);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for batching in [BatchingMode::Semantic, BatchingMode::Random { seed: 1 }, BatchingMode::Unmerged] {
        let cfg = AggregateConfig { max_context: 90, prompt_overhead: 30, batching, ..AggregateConfig::default() };
        for _ in 0..3 {
            let mut cands = candidates(&corpus);
            cands.chunk_ids.shuffle(&mut rng);
            let run = Aggregator::new(&corpus, &c, &prompts, cfg.clone()).run(&q, &cands).unwrap();
            assert_eq!(run.answer.entities, oracle, "{batching:?}");
        }
    }
}

#[test]
fn empty_candidates_give_an_empty_answer() {
    let corpus = synthetic_corpus(1, 2, ChunkPolicy::default());
    let c = client(per_chunk_judge());
    let prompts = PromptSet::builtin();
    let q = two_conditions("q", Composition::Leaf("c1".into()));
    let empty = CandidateSet { query_id: "q".into(), snapshot_id: 3, chunk_ids: vec![], trail: vec![] };
    let run = Aggregator::new(&corpus, &c, &prompts, AggregateConfig::default()).run(&q, &empty).unwrap();
    assert_eq!(run.answer.count, 0);
    assert_eq!(c.ledger().snapshot().total.calls, 0);
}
