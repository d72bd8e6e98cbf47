use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Tfidf,
    Embedding,
    /// Concatenation of weighted TF-IDF and embedding parts.
    Combined,
}

/// Dense real-valued feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub kind: FeatureKind,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(kind: FeatureKind, values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self { kind, values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= n);
        }
        self
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.values.iter_mut().for_each(|v| *v *= factor);
        self
    }
}

/// Cosine similarity. Returns 0 when either vector is zero.
///
/// # Panics
/// If the dimensions differ.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len(), "cosine_sim: dimension mismatch");
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    (dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0)
}

/// Weighted mean `(wa * a + wb * b) / (wa + wb)`.
pub fn weighted_mean(a: &[f64], wa: f64, b: &[f64], wb: f64) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "weighted_mean: dimension mismatch");
    let total = wa + wb;
    if total == 0.0 {
        return a.to_vec();
    }
    a.iter().zip(b).map(|(x, y)| (wa / total) * x + (wb / total) * y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine_sim(&[2.0, 0.0], &[1.0, 0.0]), 1.0);
        // 1 / sqrt(2)
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_and_scale_invariant(
            u in prop::collection::vec(-10.0f64..10.0, 4),
            v in prop::collection::vec(-10.0f64..10.0, 4),
            s in 0.01f64..100.0,
        ) {
            let c = cosine_sim(&u, &v);
            prop_assert!((c - cosine_sim(&v, &u)).abs() < 1e-12);
            let scaled: Vec<f64> = u.iter().map(|x| x * s).collect();
            prop_assert!((c - cosine_sim(&scaled, &v)).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
