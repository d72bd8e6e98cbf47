//! TF-IDF features: raw term frequency, smoothed idf, L2-normalized rows.
//!
//! idf(t) = ln((1 + N) / (1 + df(t))) + 1

use std::collections::{BTreeMap, BTreeSet};

use super::vector::{FeatureKind, FeatureVector};
use crate::corpus::{Chunk, ChunkId};
use crate::tokenize::analyze;

#[derive(Debug, Clone, PartialEq)]
pub struct TfidfModel {
    vocabulary: Vec<String>,
    positions: BTreeMap<String, usize>,
    idf: Vec<f64>,
}

impl TfidfModel {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        let mut n = 0usize;
        for text in texts {
            n += 1;
            for term in analyze(text).into_iter().collect::<BTreeSet<_>>() {
                *df.entry(term).or_insert(0) += 1;
            }
        }
        let vocabulary: Vec<String> = df.keys().cloned().collect();
        let positions = vocabulary.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let idf = vocabulary.iter().map(|t| smoothed_idf(n, df[t])).collect();
        Self { vocabulary, positions, idf }
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.positions.get(term).map(|&i| self.idf[i])
    }

    /// Terms outside the fitted vocabulary are ignored.
    pub fn transform(&self, text: &str) -> FeatureVector {
        let mut values = vec![0.0; self.vocabulary.len()];
        for term in analyze(text) {
            if let Some(&i) = self.positions.get(&term) {
                values[i] += 1.0;
            }
        }
        for (v, idf) in values.iter_mut().zip(&self.idf) {
            *v *= idf;
        }
        FeatureVector::new(FeatureKind::Tfidf, values).normalized()
    }
}

pub fn smoothed_idf(n_docs: usize, df: usize) -> f64 {
    ((1.0 + n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
}

/// Fit on `chunks` and return one vector per chunk.
pub fn tfidf_features(chunks: &[&Chunk]) -> BTreeMap<ChunkId, FeatureVector> {
    let model = TfidfModel::fit(chunks.iter().map(|c| c.text.as_str()));
    chunks.iter().map(|c| (c.chunk_id.clone(), model.transform(&c.text))).collect()
}
