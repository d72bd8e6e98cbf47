//! Filtering tools. Each tool is a predicate over chunk text; applying a tool
//! to a snapshot keeps the chunks for which the predicate holds.
//!
//! Text predicates are case-insensitive except `regex`, which uses the pattern
//! as given (prefix it with `(?i)` for case-insensitive matching).

use std::fmt;

use regex::Regex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::FilterError;
use crate::index::{cosine_sim, EmbeddingProvider, FeatureVector};
use crate::tokenize::analyze;

pub const TOOL_NAMES: [&str; 6] = ["exact_match", "keyword_any", "keyword_all", "regex", "fuzzy_match", "embed_sim"];

/// Human-readable tool registry, embedded in planning prompts.
pub const TOOL_DESCRIPTIONS: &str = "\
- exact_match {\"term\": str}: keep chunks containing the term (case-insensitive)
- keyword_any {\"terms\": [str]}: keep chunks containing at least one term
- keyword_all {\"terms\": [str]}: keep chunks containing every term
- regex {\"pattern\": str}: keep chunks matching the regular expression
- fuzzy_match {\"term\": str, \"max_norm_edit\": float in [0,1]}: keep chunks with a token window whose normalized edit distance to the term is at most max_norm_edit
- embed_sim {\"query_text\": str, \"min_cosine\": float in [-1,1]}: keep chunks whose embedding cosine to query_text is at least min_cosine";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInvocation {
    pub tool: String,
    #[serde(default)]
    pub params: serde_json::Value,
    /// Snapshot the tool runs on.
    pub target: u32,
}

impl ToolInvocation {
    pub fn new(tool: impl Into<String>, params: serde_json::Value, target: u32) -> Self {
        Self { tool: tool.into(), params, target }
    }
}

impl fmt::Display for ToolInvocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}) on snapshot {}", self.tool, self.params, self.target)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TermParams {
    term: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TermsParams {
    terms: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegexParams {
    pattern: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FuzzyParams {
    term: String,
    max_norm_edit: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbedParams {
    query_text: String,
    min_cosine: f64,
}

/// A validated tool with its parameters.
#[derive(Debug, Clone)]
pub enum Tool {
    ExactMatch { term: String },
    KeywordAny { terms: Vec<String> },
    KeywordAll { terms: Vec<String> },
    Regex { pattern: Regex },
    FuzzyMatch { term: String, max_norm_edit: f64 },
    EmbedSim { query_text: String, min_cosine: f64 },
}

fn params<T: DeserializeOwned>(tool: &str, value: &serde_json::Value) -> Result<T, FilterError> {
    let value = if value.is_null() { serde_json::json!({}) } else { value.clone() };
    serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        let field = msg.split('`').nth(1).unwrap_or("params").to_string();
        FilterError::InvalidParams { tool: tool.to_string(), field, reason: msg }
    })
}

fn invalid(tool: &str, field: &str, reason: impl Into<String>) -> FilterError {
    FilterError::InvalidParams { tool: tool.into(), field: field.into(), reason: reason.into() }
}

fn check_terms(tool: &str, terms: &[String]) -> Result<(), FilterError> {
    if terms.is_empty() {
        return Err(invalid(tool, "terms", "must contain at least one term"));
    }
    if terms.iter().any(|t| t.trim().is_empty()) {
        return Err(invalid(tool, "terms", "terms must be non-empty"));
    }
    Ok(())
}

impl Tool {
    pub fn from_invocation(inv: &ToolInvocation) -> Result<Self, FilterError> {
        let name = inv.tool.as_str();
        match name {
            "exact_match" => {
                let p: TermParams = params(name, &inv.params)?;
                if p.term.trim().is_empty() {
                    return Err(invalid(name, "term", "must be non-empty"));
                }
                Ok(Tool::ExactMatch { term: p.term.to_lowercase() })
            }
            "keyword_any" | "keyword_all" => {
                let p: TermsParams = params(name, &inv.params)?;
                check_terms(name, &p.terms)?;
                let terms = p.terms.iter().map(|t| t.to_lowercase()).collect();
                Ok(if name == "keyword_any" { Tool::KeywordAny { terms } } else { Tool::KeywordAll { terms } })
            }
            "regex" => {
                let p: RegexParams = params(name, &inv.params)?;
                let pattern = Regex::new(&p.pattern).map_err(|e| invalid(name, "pattern", e.to_string()))?;
                Ok(Tool::Regex { pattern })
            }
            "fuzzy_match" => {
                let p: FuzzyParams = params(name, &inv.params)?;
                if analyze(&p.term).is_empty() {
                    return Err(invalid(name, "term", "must contain a word"));
                }
                if !(0.0..=1.0).contains(&p.max_norm_edit) {
                    return Err(invalid(name, "max_norm_edit", "must lie in [0, 1]"));
                }
                Ok(Tool::FuzzyMatch { term: p.term, max_norm_edit: p.max_norm_edit })
            }
            "embed_sim" => {
                let p: EmbedParams = params(name, &inv.params)?;
                if p.query_text.trim().is_empty() {
                    return Err(invalid(name, "query_text", "must be non-empty"));
                }
                if !(-1.0..=1.0).contains(&p.min_cosine) {
                    return Err(invalid(name, "min_cosine", "must lie in [-1, 1]"));
                }
                Ok(Tool::EmbedSim { query_text: p.query_text, min_cosine: p.min_cosine })
            }
            other => Err(FilterError::UnknownTool(other.to_string())),
        }
    }

    /// Prepared matcher; embeds the query once for `embed_sim`.
    pub fn matcher<'a>(&'a self, embedder: &'a dyn EmbeddingProvider) -> Result<Matcher<'a>, FilterError> {
        let query_vec = match self {
            Tool::EmbedSim { query_text, .. } => {
                Some(embedder.embed(&[query_text.as_str()]).map_err(FilterError::Embed)?.remove(0))
            }
            _ => None,
        };
        Ok(Matcher { tool: self, embedder, query_vec })
    }
}

pub struct Matcher<'a> {
    tool: &'a Tool,
    embedder: &'a dyn EmbeddingProvider,
    query_vec: Option<FeatureVector>,
}

impl Matcher<'_> {
    pub fn matches(&self, text: &str) -> Result<bool, FilterError> {
        Ok(match self.tool {
            Tool::ExactMatch { term } => text.to_lowercase().contains(term.as_str()),
            Tool::KeywordAny { terms } => {
                let lower = text.to_lowercase();
                terms.iter().any(|t| lower.contains(t.as_str()))
            }
            Tool::KeywordAll { terms } => {
                let lower = text.to_lowercase();
                terms.iter().all(|t| lower.contains(t.as_str()))
            }
            Tool::Regex { pattern } => pattern.is_match(text),
            Tool::FuzzyMatch { term, max_norm_edit } => fuzzy_contains(text, term, *max_norm_edit),
            Tool::EmbedSim { min_cosine, .. } => {
                let q = self.query_vec.as_ref().expect("query embedding prepared");
                let v = self.embedder.embed(&[text]).map_err(FilterError::Embed)?.remove(0);
                cosine_sim(&q.values, &v.values) >= *min_cosine
            }
        })
    }
}

/// Levenshtein distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the longer length (0 for two empty strings).
pub fn normalized_edit(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 0.0;
    }
    levenshtein(a, b) as f64 / longest as f64
}

/// True when some window of analyzed tokens, as long as the analyzed term,
/// is within `max_norm_edit` of it.
pub fn fuzzy_contains(text: &str, term: &str, max_norm_edit: f64) -> bool {
    let needle = analyze(term);
    let tokens = analyze(text);
    if needle.is_empty() || tokens.len() < needle.len() {
        return false;
    }
    let needle = needle.join(" ");
    let n = needle.split(' ').count();
    tokens.windows(n).any(|w| normalized_edit(&w.join(" "), &needle) <= max_norm_edit)
}
