//! Query parsing, ambiguity classification, clarification, and rewriting.
//!
//! Every model-backed step has a deterministic offline counterpart:
//! [`parse_query_rules`], [`classify_rules`], template-only clarification
//! questions, and suffix-based rewriting.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::Deserialize;
use thiserror::Error;

use crate::llm::{parse_json_response, CompletionRequest, LlmClient, LlmError, Message, Purpose};
use crate::prompts::{render, PromptSet, TemplateError};
use crate::query::{
    query_id_for, AmbiguityCode, AmbiguityLabel, Clarification, Composition, Condition, Constraint, LabelTarget,
    QuerySpec, ResolutionKind,
};

#[derive(Debug, Error)]
pub enum DisambiguationError {
    #[error("query text is empty")]
    EmptyQuery,
    #[error("malformed {purpose} response ({reason}); raw response: {raw}")]
    MalformedResponse { purpose: Purpose, reason: String, raw: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("clarification `{0}` is already resolved")]
    AlreadyResolved(String),
    #[error("unresolved clarifications: {}", .0.join(", "))]
    Unresolved(Vec<String>),
    #[error("clarification targets unknown condition `{0}`")]
    UnknownCondition(String),
    #[error("answer is empty")]
    EmptyAnswer,
    #[error("invalid query spec: {0}")]
    InvalidSpec(String),
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Deserialize)]
struct ParsedQuery {
    entity_type: String,
    conditions: Vec<ParsedCondition>,
    #[serde(default)]
    composition: Option<Composition>,
}

#[derive(Deserialize)]
struct ParsedCondition {
    id: String,
    text: String,
}

pub fn parse_query(raw: &str, llm: &LlmClient, prompts: &PromptSet) -> Result<QuerySpec, DisambiguationError> {
    if raw.trim().is_empty() {
        return Err(DisambiguationError::EmptyQuery);
    }
    let prompt = render(&prompts.parse, &[("question", raw.trim())])?;
    let req = CompletionRequest::new(Purpose::Parse, vec![Message::system(&prompts.system), Message::user(prompt)]);
    let resp = llm.complete(&req)?;
    let malformed = |reason: String| DisambiguationError::MalformedResponse {
        purpose: Purpose::Parse,
        reason,
        raw: resp.text.clone(),
    };
    let parsed: ParsedQuery = parse_json_response(&resp.text).map_err(&malformed)?;
    let conditions: Vec<Condition> = parsed.conditions.into_iter().map(|c| Condition::new(c.id, c.text)).collect();
    let composition =
        parsed.composition.unwrap_or_else(|| Composition::and_of(conditions.iter().map(|c| c.condition_id.clone())));
    QuerySpec::new(query_id_for(raw), raw.trim(), parsed.entity_type.trim().to_lowercase(), conditions, composition)
        .map_err(malformed)
}

const COUNT_PREFIXES: &[&str] = &[
    "how many",
    "what is the number of",
    "what is the total number of",
    "the number of",
    "number of",
    "count the",
    "count",
    "list all",
    "find all",
];

const QUANTITY_WORDS: &[&str] = &["distinct", "unique", "different", "all", "the", "total", "of"];

const LEADING_AUX: &[&str] = &["are", "is", "were", "was", "that", "which", "who", "have", "has", "been", "being"];

const NOT_PLURAL: &[&str] = &[
    "this", "is", "was", "has", "does", "its", "always", "as", "us", "his", "thus", "various", "previous", "famous",
    "numerous", "across", "less", "unless", "yes", "news", "bias", "analysis", "corpus", "status", "focus",
];

/// Deterministic fallback parser for "how many <entities> <conditions>" questions.
///
/// The entity head is the first plural-looking word; words before it become a
/// modifier condition and the remainder becomes one condition per `and`/`or`
/// clause (a mix of both stays a single condition).
pub fn parse_query_rules(raw: &str) -> Result<QuerySpec, DisambiguationError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(DisambiguationError::EmptyQuery);
    }
    let body = trimmed.trim_end_matches(['?', '.', '!']).trim();
    let lower = body.to_lowercase();
    let mut rest = body;
    for prefix in COUNT_PREFIXES {
        if lower.starts_with(prefix) && lower[prefix.len()..].starts_with(char::is_whitespace) {
            rest = body[prefix.len()..].trim_start();
            break;
        }
    }
    let words: Vec<&str> = rest.split_whitespace().collect();
    let mut skip = 0;
    while skip + 1 < words.len() && QUANTITY_WORDS.contains(&words[skip].to_lowercase().as_str()) {
        skip += 1;
    }
    let words = &words[skip..];
    let head_idx = words.iter().position(|w| looks_plural(w)).unwrap_or(0);
    let head = words.get(head_idx).copied().unwrap_or("entity");
    let entity_type = singularize(head.to_lowercase().trim_matches(|c: char| !c.is_alphanumeric()));

    let modifiers = words[..head_idx].join(" ");
    let mut tail: Vec<&str> = words.get(head_idx + 1..).unwrap_or(&[]).to_vec();
    while tail.len() > 1 && LEADING_AUX.contains(&tail[0].to_lowercase().as_str()) {
        tail.remove(0);
    }
    let tail = tail.join(" ");

    let mut texts = Vec::new();
    if !modifiers.is_empty() {
        texts.push(modifiers);
    }
    let tail_lower = format!(" {} ", tail.to_lowercase());
    let (has_and, has_or) = (tail_lower.contains(" and "), tail_lower.contains(" or "));
    let or_clauses = has_or && !has_and;
    if !tail.is_empty() {
        if has_and != has_or {
            let sep = if has_and { " and " } else { " or " };
            texts.extend(split_ci(&tail, sep).into_iter().filter(|s| !s.is_empty()));
        } else {
            texts.push(tail);
        }
    }
    if texts.is_empty() {
        texts.push(format!("is a {entity_type} mentioned in the corpus"));
    }
    let conditions: Vec<Condition> =
        texts.into_iter().enumerate().map(|(i, t)| Condition::new(format!("c{}", i + 1), t)).collect();
    let ids: Vec<String> = conditions.iter().map(|c| c.condition_id.clone()).collect();
    let composition = if or_clauses && !words[..head_idx].is_empty() {
        // modifiers AND (clause OR clause ...)
        Composition::And(vec![Composition::Leaf(ids[0].clone()), Composition::or_of(ids[1..].iter().cloned())])
    } else if or_clauses {
        Composition::or_of(ids)
    } else {
        Composition::and_of(ids)
    };
    QuerySpec::new(query_id_for(trimmed), trimmed, entity_type, conditions, composition)
        .map_err(DisambiguationError::InvalidSpec)
}

fn looks_plural(word: &str) -> bool {
    let w = word.to_lowercase();
    let w = w.trim_matches(|c: char| !c.is_alphanumeric());
    w.len() > 3
        && w.ends_with('s')
        && !w.ends_with("ss")
        && !w.ends_with("us")
        && w.chars().all(|c| c.is_alphabetic() || c == '-')
        && !NOT_PLURAL.contains(&w)
}

fn singularize(word: &str) -> String {
    if let Some(stem) = word.strip_suffix("ies") {
        return format!("{stem}y");
    }
    for suffix in ["sses", "xes", "ches", "shes"] {
        if word.ends_with(suffix) {
            return word[..word.len() - 2].to_string();
        }
    }
    word.strip_suffix('s').unwrap_or(word).to_string()
}

fn split_ci(text: &str, sep: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut last = 0;
    for (i, _) in lower.match_indices(sep) {
        out.push(text[last..i].trim().to_string());
        last = i + sep.len();
    }
    out.push(text[last..].trim().to_string());
    out
}

// ---------------------------------------------------------------------------
// Classification

static A1_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(?:(?:high|low|top|well|world)-[a-z]+|large|larger|small|big|major|minor|popular|significant|important|prominent|influential|leading|successful|famous|renowned|well known|prolific|highly cited|frequent|frequently|rare|rarely|expensive|cheap|long-running|advanced|state of the art)\b",
    )
    .unwrap()
});

static A2_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(?:recently|recent|lately|nowadays|currently|soon|upcoming|newest|latest|nearby|near\s+[\w-]+|close to\s+[\w-]+|far from\s+[\w-]+|this\s+(?:decade|year|month|week|century)|(?:last|past)\s+few\s+\w+|in recent years)\b",
    )
    .unwrap()
});

static NEGATION_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:(?:did|do|does|have|has|had|is|are|was|were|could|can|will)\s+)?(?:not|never|no|without|none|neither|nor)\b|\b\w+n't\b").unwrap()
});

static QUANTIFIER_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(?:at least|at most|more than|fewer than|less than|all|every|each|any|only|exactly|both)(?:\s+(?:\d+|one|two|three|four|five|six|seven|eight|nine|ten|twice))?\b|\b(?:\d+|one|two|three|four|five|six|seven|eight|nine|ten)\b",
    )
    .unwrap()
});

static B2_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(?:on|in|from|with|about|for|by|under|across|within|during|at)\s+(?:[\w-]+\s+){1,3}?(?:on|in|from|with|about|for|by|under|across|within|during|at)\s+[\w-]+",
    )
    .unwrap()
});

static C1_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)^(?:experiment|run|section|study|trial|evaluation|result|record|entry|case|instance|mention|occurrence)$",
    )
    .unwrap()
});

static C2_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:distinct|unique|different|aliases|alias|variants|also known as)\b").unwrap()
});

fn target_for(q: &QuerySpec, fragment: &str) -> LabelTarget {
    let needle = fragment.to_lowercase();
    q.conditions
        .iter()
        .find(|c| c.text.to_lowercase().contains(&needle))
        .map(|c| LabelTarget::Condition(c.condition_id.clone()))
        .unwrap_or(LabelTarget::Query)
}

/// Keyword and pattern classifier. A pure function of the query.
///
/// C3 (unknown entity label) needs world knowledge and is only produced by
/// the model-backed classifier.
pub fn classify_rules(q: &QuerySpec) -> Vec<AmbiguityLabel> {
    let text = q.raw_text.as_str();
    let mut labels = Vec::new();
    let mut push = |code: AmbiguityCode, fragment: &str, rationale: &str| {
        labels.push(AmbiguityLabel {
            code,
            fragment: fragment.to_string(),
            rationale: rationale.to_string(),
            target: if code.is_entity_level() { LabelTarget::Query } else { target_for(q, fragment) },
        });
    };

    for m in A1_RE.find_iter(text) {
        push(AmbiguityCode::A1, m.as_str(), "gradable adjective without an explicit cut-off");
    }
    for m in A2_RE.find_iter(text) {
        push(AmbiguityCode::A2, m.as_str(), "relative time or distance phrase without a window");
    }
    if let Some(neg) = NEGATION_RE.find(text) {
        if let Some(quant) = QUANTIFIER_RE.find_iter(text).find(|m| m.start() != neg.start()) {
            let (start, end) = (neg.start().min(quant.start()), neg.end().max(quant.end()));
            push(AmbiguityCode::B1, &text[start..end], "negation combined with a quantifier");
        }
    }
    // "at least" / "at most" are quantifiers, not prepositional phrases.
    let masked = text.replace("at least", "at_least").replace("at most", "at_most");
    for m in B2_RE.find_iter(&masked) {
        push(AmbiguityCode::B2, &text[m.start()..m.end()], "stacked prepositional modifiers");
    }
    if C1_RE.is_match(&q.entity_type) {
        push(AmbiguityCode::C1, &q.entity_type, "counting unit could be document, section, or run");
    }
    if let Some(m) = C2_RE.find(text) {
        push(AmbiguityCode::C2, m.as_str(), "alias merging rule unspecified");
    }
    labels
}

#[derive(Deserialize)]
struct ClassifyResponse {
    labels: Vec<RawLabel>,
}

#[derive(Deserialize)]
struct RawLabel {
    code: String,
    #[serde(default)]
    fragment: String,
    #[serde(default)]
    target: Option<String>,
    #[serde(default)]
    rationale: String,
}

/// Model-backed classifier. Codes outside the taxonomy are dropped; an
/// unparseable response falls back to [`classify_rules`].
pub fn classify_with_llm(
    q: &QuerySpec,
    llm: &LlmClient,
    prompts: &PromptSet,
) -> Result<Vec<AmbiguityLabel>, DisambiguationError> {
    let conditions =
        q.conditions.iter().map(|c| format!("- {}: {}", c.condition_id, c.text)).collect::<Vec<_>>().join("\n");
    let prompt = render(
        &prompts.classify,
        &[("question", &q.raw_text), ("entity_type", &q.entity_type), ("conditions", &conditions)],
    )?;
    let req = CompletionRequest::new(Purpose::Classify, vec![Message::system(&prompts.system), Message::user(prompt)]);
    let resp = llm.complete(&req)?;
    let parsed: ClassifyResponse = match parse_json_response(&resp.text) {
        Ok(p) => p,
        Err(e) => {
            log::warn!("classifier response unparseable ({e}); using rule-based labels");
            return Ok(classify_rules(q));
        }
    };
    let ids = q.condition_ids();
    Ok(parsed
        .labels
        .into_iter()
        .filter_map(|l| {
            let code = l.code.parse::<AmbiguityCode>().ok()?;
            let target = match l.target {
                Some(t) if ids.contains(t.as_str()) => LabelTarget::Condition(t),
                _ if code.is_entity_level() => LabelTarget::Query,
                _ => target_for(q, &l.fragment),
            };
            Some(AmbiguityLabel { code, fragment: l.fragment, rationale: l.rationale, target })
        })
        .collect())
}

pub enum Classifier<'a> {
    Rules,
    Llm { client: &'a LlmClient, prompts: &'a PromptSet },
}

pub fn classify_ambiguity(
    q: &QuerySpec,
    classifier: &Classifier<'_>,
) -> Result<Vec<AmbiguityLabel>, DisambiguationError> {
    match classifier {
        Classifier::Rules => Ok(classify_rules(q)),
        Classifier::Llm { client, prompts } => classify_with_llm(q, client, prompts),
    }
}

// ---------------------------------------------------------------------------
// Clarification

/// One question per label. Without a client the rendered template is the
/// question; with one, the template is a draft the model turns into a question.
pub fn generate_clarifications(
    q: &QuerySpec,
    labels: &[AmbiguityLabel],
    prompts: &PromptSet,
    llm: Option<&LlmClient>,
) -> Result<Vec<Clarification>, DisambiguationError> {
    let mut out = Vec::with_capacity(labels.len());
    for (i, label) in labels.iter().enumerate() {
        let condition_text = match &label.target {
            LabelTarget::Condition(id) => q.condition(id).map(|c| c.text.as_str()).unwrap_or(""),
            LabelTarget::Query => "",
        };
        let slots = [
            ("fragment", label.fragment.as_str()),
            ("question", q.raw_text.as_str()),
            ("entity_type", q.entity_type.as_str()),
            ("condition", condition_text),
            ("code", label.code.as_str()),
        ];
        let draft = render(prompts.clarify_template(label.code)?, &slots)?;
        let question = match llm {
            None => draft,
            Some(client) => {
                let mut slots = slots.to_vec();
                slots.push(("draft", draft.as_str()));
                let prompt = render(&prompts.clarify, &slots)?;
                let req = CompletionRequest::new(
                    Purpose::Clarify,
                    vec![Message::system(&prompts.system), Message::user(prompt)],
                );
                let text = client.complete(&req)?.text.trim().to_string();
                if text.is_empty() {
                    draft
                } else {
                    text
                }
            }
        };
        out.push(Clarification {
            clarification_id: format!("k{}", i + 1),
            code: label.code,
            fragment: label.fragment.clone(),
            target: label.target.clone(),
            question,
            answer: None,
            resolution: None,
            resolution_note: None,
        });
    }
    Ok(out)
}

/// Split a free-text answer into constraint notes on `,`, `;`, `&`, and ` and `.
pub fn answer_notes(answer: &str) -> Vec<String> {
    answer
        .split([',', ';', '&'])
        .flat_map(|part| split_ci(part, " and "))
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Record `answer` on `clarification` and return the query with the new
/// constraints attached to the clarification's target. Existing constraints
/// are kept; a note already present is not duplicated.
pub fn apply_answer(
    q: &QuerySpec,
    clarification: &mut Clarification,
    answer: &str,
) -> Result<QuerySpec, DisambiguationError> {
    if clarification.is_resolved() {
        return Err(DisambiguationError::AlreadyResolved(clarification.clarification_id.clone()));
    }
    let notes = answer_notes(answer);
    if notes.is_empty() {
        return Err(DisambiguationError::EmptyAnswer);
    }
    let mut next = q.clone();
    let list = match &clarification.target {
        LabelTarget::Condition(id) => {
            &mut next
                .conditions
                .iter_mut()
                .find(|c| &c.condition_id == id)
                .ok_or_else(|| DisambiguationError::UnknownCondition(id.clone()))?
                .constraints
        }
        LabelTarget::Query => &mut next.scope_notes,
    };
    for note in notes {
        if !list.iter().any(|c| c.note == note) {
            list.push(Constraint { code: clarification.code, note });
        }
    }
    clarification.answer = Some(answer.trim().to_string());
    clarification.resolution = Some(ResolutionKind::Answered);
    clarification.resolution_note = Some(format!("{} resolved by user", clarification.code));
    Ok(next)
}

/// Resolve a clarification with the literal reading of the question.
pub fn skip_clarification(clarification: &mut Clarification) -> Result<(), DisambiguationError> {
    if clarification.is_resolved() {
        return Err(DisambiguationError::AlreadyResolved(clarification.clarification_id.clone()));
    }
    clarification.answer = Some(format!("default interpretation of \"{}\"", clarification.fragment));
    clarification.resolution = Some(ResolutionKind::SkippedWithDefault);
    clarification.resolution_note = Some("skipped; literal reading kept".into());
    Ok(())
}

// ---------------------------------------------------------------------------
// Rewriting

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteMode {
    ClassificationGuided,
    Direct,
}

static UNIT_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\s*(?:unit\s*[=:]\s*)?(?:count\s+)?(?:by\s+)?(.+?)(?:[\s-]+level)?\s*$").unwrap()
});

/// Entity type implied by a granularity resolution such as "unit = paper level".
pub fn unit_from_note(note: &str) -> Option<String> {
    let caps = UNIT_RE.captures(note)?;
    let unit = caps.get(1)?.as_str().trim().to_lowercase();
    (!unit.is_empty() && unit.split_whitespace().count() <= 3).then(|| singularize(&unit))
}

fn constraint_suffix(q: &QuerySpec) -> Option<String> {
    let mut parts = Vec::new();
    for c in &q.conditions {
        if !c.constraints.is_empty() {
            let notes: Vec<&str> = c.constraints.iter().map(|k| k.note.as_str()).collect();
            parts.push(format!("{}: {}", c.text, notes.join(", ")));
        }
    }
    for note in &q.scope_notes {
        parts.push(format!("{}: {}", note.code.description(), note.note));
    }
    (!parts.is_empty()).then(|| format!("(where {})", parts.join("; ")))
}

/// Rewrite the question so it states every resolved constraint verbatim.
///
/// Guided mode requires every clarification to be resolved. The entity type
/// changes only through a C1 resolution.
pub fn rewrite_query(
    q: &QuerySpec,
    clarifications: &[Clarification],
    mode: RewriteMode,
    prompts: &PromptSet,
    llm: Option<&LlmClient>,
) -> Result<QuerySpec, DisambiguationError> {
    if mode == RewriteMode::ClassificationGuided {
        let pending: Vec<String> =
            clarifications.iter().filter(|c| !c.is_resolved()).map(|c| c.clarification_id.clone()).collect();
        if !pending.is_empty() {
            return Err(DisambiguationError::Unresolved(pending));
        }
    }
    let constraints = q.all_constraints();
    if constraints.is_empty() {
        return Ok(q.clone());
    }
    let mut next = q.clone();
    if let Some(unit) =
        q.scope_notes.iter().rev().find(|c| c.code == AmbiguityCode::C1).and_then(|c| unit_from_note(&c.note))
    {
        next.entity_type = unit;
    }

    let offline = || format!("{} {}", q.raw_text.trim(), constraint_suffix(q).unwrap_or_default());
    let mut text = match llm {
        None => offline(),
        Some(client) => {
            let listing =
                constraints.iter().map(|c| format!("- [{}] {}", c.code, c.note)).collect::<Vec<_>>().join("\n");
            let mode_name = match mode {
                RewriteMode::ClassificationGuided => "classification-guided",
                RewriteMode::Direct => "direct",
            };
            let prompt = render(
                &prompts.rewrite,
                &[
                    ("mode", mode_name),
                    ("question", &q.raw_text),
                    ("entity_type", &next.entity_type),
                    ("constraints", &listing),
                ],
            )?;
            let req =
                CompletionRequest::new(Purpose::Rewrite, vec![Message::system(&prompts.system), Message::user(prompt)]);
            client.complete(&req)?.text.trim().to_string()
        }
    };
    let missing: Vec<&str> = constraints
        .iter()
        .map(|c| c.note.as_str())
        .filter(|n| !text.contains(n))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if text.is_empty() {
        text = offline();
    } else if !missing.is_empty() {
        log::warn!("rewrite dropped {} constraint(s); appending them", missing.len());
        text = format!("{} (where {})", text, missing.join("; "));
    }
    next.raw_text = text;
    Ok(next)
}
