use aggquery_core::corpus::{chunk_document, corpus_stats, CorpusError};
use aggquery_core::tokenize::count_tokens;
use aggquery_core::{ChunkPolicy, Corpus, Document};
use proptest::prelude::*;

fn text_strategy() -> impl Strategy<Value = String> {
    proptest::collection::vec(("[a-zé]{1,6}", "[ \n\t]{1,3}"), 1..60)
        .prop_map(|parts| parts.into_iter().map(|(w, s)| format!("{w}{s}")).collect::<String>())
}

proptest! {
    #[test]
    fn chunks_tile_the_document(text in text_strategy(), max in 1usize..12, overlap_frac in 0.0f64..0.9) {
        let overlap = ((max as f64) * overlap_frac) as usize;
        let policy = ChunkPolicy::new(max, overlap.min(max - 1)).unwrap();
        let doc = Document::new("d", text.clone());
        let chunks = chunk_document(&doc, &policy).unwrap();
        let chars: Vec<char> = text.chars().collect();
        prop_assert_eq!(chunks[0].span.start, 0);
        prop_assert_eq!(chunks.last().unwrap().span.end, chars.len());
        for (i, c) in chunks.iter().enumerate() {
            prop_assert_eq!(c.ordinal, i);
            prop_assert!(c.token_count >= 1 && c.token_count <= max);
            prop_assert_eq!(count_tokens(&c.text), c.token_count);
            let slice: String = chars[c.span.start..c.span.end].iter().collect();
            prop_assert_eq!(&slice, &c.text);
        }
        for w in chunks.windows(2) {
            prop_assert!(w[1].span.start > w[0].span.start);
            prop_assert!(w[1].span.start <= w[0].span.end);
        }
        let total: usize = chunks.iter().map(|c| c.token_count).sum();
        let stride = policy.max_tokens - policy.overlap;
        prop_assert_eq!(total - (chunks.len() - 1) * (max - stride), count_tokens(&text));
    }

    #[test]
    fn corpus_reconstructs_documents(texts in proptest::collection::vec(text_strategy(), 1..5)) {
        let docs: Vec<Document> = texts.iter().enumerate().map(|(i, t)| Document::new(format!("doc{i}"), t.clone())).collect();
        let corpus = Corpus::ingest("p", &docs, ChunkPolicy::new(5, 2).unwrap()).unwrap();
        for d in &docs {
            prop_assert_eq!(corpus.reconstruct_document(&d.doc_id).unwrap(), d.text.clone());
        }
    }
}

#[test]
fn ingest_rejects_bad_input() {
    let dup = vec![Document::new("a", "x"), Document::new("a", "y")];
    assert!(matches!(Corpus::ingest("c", &dup, ChunkPolicy::default()), Err(CorpusError::DuplicateDocId(_))));
    let blank = vec![Document::new("a", "   ")];
    assert!(matches!(Corpus::ingest("c", &blank, ChunkPolicy::default()), Err(CorpusError::EmptyDocument(_))));
    assert!(matches!(ChunkPolicy::new(4, 4), Err(CorpusError::InvalidPolicy(_))));
    assert!(matches!(ChunkPolicy::new(0, 0), Err(CorpusError::InvalidPolicy(_))));
}

#[test]
fn save_and_load_round_trip() {
    let docs = vec![Document::new("a", "one two three four five six"), Document::new("b", "seven eight")];
    let corpus = Corpus::ingest("rt", &docs, ChunkPolicy::new(4, 1).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.save(dir.path()).unwrap();
    let back = Corpus::load(dir.path()).unwrap();
    assert_eq!(back.manifest(), corpus.manifest());
    assert_eq!(back.chunks().collect::<Vec<_>>(), corpus.chunks().collect::<Vec<_>>());
    assert_eq!(back.chunk_ids().collect::<Vec<_>>(), vec!["a#00000", "a#00001", "b#00000"]);
}

#[test]
fn stats_validate_evidence_ids() {
    let docs = vec![Document::new("a", "one two"), Document::new("b", "three")];
    let corpus = Corpus::ingest("s", &docs, ChunkPolicy::default()).unwrap();
    let s = corpus_stats(&corpus, Some(&["a#00000", "a#00000"])).unwrap();
    assert_eq!(s.evidence_chunk_count, Some(1));
    assert_eq!(s.evidence_density, Some(0.5));
    assert_eq!(s.token_total, 3);
    assert!(matches!(corpus_stats(&corpus, Some(&["zz#00000"])), Err(CorpusError::UnknownChunk(_))));
    assert!(corpus_stats::<&str>(&corpus, None).unwrap().evidence_density.is_none());
}
