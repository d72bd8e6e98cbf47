//! Query model: one entity type, a set of conditions, and an AND/OR composition.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AmbiguityCode {
    A1,
    A2,
    B1,
    B2,
    C1,
    C2,
    C3,
}

impl AmbiguityCode {
    pub const ALL: [AmbiguityCode; 7] = [
        AmbiguityCode::A1,
        AmbiguityCode::A2,
        AmbiguityCode::B1,
        AmbiguityCode::B2,
        AmbiguityCode::C1,
        AmbiguityCode::C2,
        AmbiguityCode::C3,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AmbiguityCode::A1 => "A1",
            AmbiguityCode::A2 => "A2",
            AmbiguityCode::B1 => "B1",
            AmbiguityCode::B2 => "B2",
            AmbiguityCode::C1 => "C1",
            AmbiguityCode::C2 => "C2",
            AmbiguityCode::C3 => "C3",
        }
    }

    pub fn description(&self) -> &'static str {
        match self {
            AmbiguityCode::A1 => "scalar / implicit threshold",
            AmbiguityCode::A2 => "temporal / spatial window",
            AmbiguityCode::B1 => "logical scope",
            AmbiguityCode::B2 => "attachment ambiguity",
            AmbiguityCode::C1 => "entity-type granularity",
            AmbiguityCode::C2 => "cross-document dedup",
            AmbiguityCode::C3 => "unknown entity label",
        }
    }

    pub fn is_entity_level(&self) -> bool {
        matches!(self, AmbiguityCode::C1 | AmbiguityCode::C2 | AmbiguityCode::C3)
    }
}

impl fmt::Display for AmbiguityCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AmbiguityCode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AmbiguityCode::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown ambiguity code `{s}`"))
    }
}

/// A resolved interpretation attached to a condition or to the whole query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constraint {
    pub code: AmbiguityCode,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub condition_id: String,
    pub text: String,
    #[serde(default)]
    pub constraints: Vec<Constraint>,
}

impl Condition {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { condition_id: id.into(), text: text.into(), constraints: Vec::new() }
    }
}

/// Boolean composition over condition ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    Leaf(String),
    And(Vec<Composition>),
    Or(Vec<Composition>),
}

impl Composition {
    pub fn and_of<I: IntoIterator<Item = S>, S: Into<String>>(ids: I) -> Self {
        let mut leaves: Vec<Composition> = ids.into_iter().map(|s| Composition::Leaf(s.into())).collect();
        if leaves.len() == 1 {
            leaves.pop().unwrap()
        } else {
            Composition::And(leaves)
        }
    }

    pub fn or_of<I: IntoIterator<Item = S>, S: Into<String>>(ids: I) -> Self {
        let mut leaves: Vec<Composition> = ids.into_iter().map(|s| Composition::Leaf(s.into())).collect();
        if leaves.len() == 1 {
            leaves.pop().unwrap()
        } else {
            Composition::Or(leaves)
        }
    }

    pub fn leaves(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            Composition::Leaf(id) => {
                out.insert(id.as_str());
            }
            Composition::And(xs) | Composition::Or(xs) => xs.iter().for_each(|x| x.collect_leaves(out)),
        }
    }

    fn has_empty_node(&self) -> bool {
        match self {
            Composition::Leaf(_) => false,
            Composition::And(xs) | Composition::Or(xs) => xs.is_empty() || xs.iter().any(|x| x.has_empty_node()),
        }
    }

    /// Evaluate with missing verdicts read as false.
    pub fn evaluate(&self, verdicts: &BTreeMap<String, bool>) -> bool {
        match self {
            Composition::Leaf(id) => verdicts.get(id).copied().unwrap_or(false),
            Composition::And(xs) => xs.iter().all(|x| x.evaluate(verdicts)),
            Composition::Or(xs) => xs.iter().any(|x| x.evaluate(verdicts)),
        }
    }

    pub fn operator_name(&self) -> &'static str {
        match self {
            Composition::Leaf(_) => "leaf",
            Composition::And(_) => "and",
            Composition::Or(_) => "or",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub query_id: String,
    pub raw_text: String,
    pub entity_type: String,
    pub conditions: Vec<Condition>,
    pub composition: Composition,
    /// Whole-query resolutions (entity-level ambiguities).
    #[serde(default)]
    pub scope_notes: Vec<Constraint>,
}

impl QuerySpec {
    pub fn new(
        query_id: impl Into<String>,
        raw_text: impl Into<String>,
        entity_type: impl Into<String>,
        conditions: Vec<Condition>,
        composition: Composition,
    ) -> Result<Self, String> {
        let spec = Self {
            query_id: query_id.into(),
            raw_text: raw_text.into(),
            entity_type: entity_type.into(),
            conditions,
            composition,
            scope_notes: Vec::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Single-condition query.
    pub fn simple(query_id: &str, raw_text: &str, entity_type: &str, condition: &str) -> Self {
        Self::new(
            query_id,
            raw_text,
            entity_type,
            vec![Condition::new("c1", condition)],
            Composition::Leaf("c1".into()),
        )
        .expect("valid single-condition query")
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.raw_text.trim().is_empty() {
            return Err("raw_text is empty".into());
        }
        if self.entity_type.trim().is_empty() {
            return Err("entity_type is empty".into());
        }
        let mut ids = BTreeSet::new();
        for c in &self.conditions {
            if c.text.trim().is_empty() {
                return Err(format!("condition `{}` has empty text", c.condition_id));
            }
            if !ids.insert(c.condition_id.as_str()) {
                return Err(format!("duplicate condition id `{}`", c.condition_id));
            }
        }
        if self.composition.has_empty_node() {
            return Err("composition has an empty AND/OR node".into());
        }
        for leaf in self.composition.leaves() {
            if !ids.contains(leaf) {
                return Err(format!("composition references unknown condition `{leaf}`"));
            }
        }
        Ok(())
    }

    pub fn condition(&self, id: &str) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.condition_id == id)
    }

    pub fn condition_ids(&self) -> BTreeSet<&str> {
        self.conditions.iter().map(|c| c.condition_id.as_str()).collect()
    }

    /// Every resolved constraint note, conditions first, then whole-query notes.
    pub fn all_constraints(&self) -> Vec<&Constraint> {
        self.conditions.iter().flat_map(|c| c.constraints.iter()).chain(self.scope_notes.iter()).collect()
    }
}

/// Deterministic id derived from the question text.
pub fn query_id_for(raw: &str) -> String {
    let digest = Sha256::digest(raw.trim().as_bytes());
    format!("q-{}", &hex::encode(digest)[..12])
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelTarget {
    Condition(String),
    Query,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmbiguityLabel {
    pub code: AmbiguityCode,
    /// The ambiguous words as they appear in the question.
    pub fragment: String,
    pub rationale: String,
    pub target: LabelTarget,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionKind {
    Answered,
    /// Skipped; the literal reading of the question is kept.
    SkippedWithDefault,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clarification {
    pub clarification_id: String,
    pub code: AmbiguityCode,
    pub fragment: String,
    pub target: LabelTarget,
    pub question: String,
    #[serde(default)]
    pub answer: Option<String>,
    #[serde(default)]
    pub resolution: Option<ResolutionKind>,
    #[serde(default)]
    pub resolution_note: Option<String>,
}

impl Clarification {
    pub fn is_resolved(&self) -> bool {
        self.resolution.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composition_semantics() {
        let v: BTreeMap<String, bool> = [("c1".to_string(), true), ("c2".to_string(), false)].into();
        assert!(!Composition::and_of(["c1", "c2"]).evaluate(&v));
        assert!(Composition::or_of(["c1", "c2"]).evaluate(&v));
        assert!(!Composition::Leaf("c3".into()).evaluate(&v));
        assert_eq!(Composition::and_of(["c1"]), Composition::Leaf("c1".into()));
    }

    #[test]
    fn validation_catches_bad_specs() {
        let ok = QuerySpec::simple("q", "How many papers?", "paper", "apply to the legal domain");
        assert!(ok.validate().is_ok());
        assert!(
            QuerySpec::new("q", "x", "paper", vec![Condition::new("c1", "t")], Composition::Leaf("c9".into())).is_err()
        );
        assert!(QuerySpec::new("q", "x", "paper", vec![Condition::new("c1", "t")], Composition::And(vec![])).is_err());
        assert!(
            QuerySpec::new("q", "x", "paper", vec![Condition::new("c1", " ")], Composition::Leaf("c1".into())).is_err()
        );
    }

    #[test]
    fn json_shape() {
        let q = QuerySpec::simple("q1", "How many papers?", "paper", "legal");
        let v = serde_json::to_value(&q).unwrap();
        assert_eq!(v["composition"], serde_json::json!({"leaf": "c1"}));
        assert_eq!(v["conditions"][0]["condition_id"], "c1");
        assert_eq!(serde_json::to_value(LabelTarget::Query).unwrap(), "query");
        assert_eq!("b2".parse::<AmbiguityCode>().unwrap(), AmbiguityCode::B2);
        assert!("D1".parse::<AmbiguityCode>().is_err());
    }
}
