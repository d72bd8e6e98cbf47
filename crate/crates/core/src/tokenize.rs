//! Tokenizers shared by the chunker and the indexes.
//!
//! Two fixed tokenizers are used throughout:
//!
//! * [`whitespace_tokens`] splits on Unicode whitespace. It defines
//!   `Chunk::token_count` and the chunk window boundaries.
//! * [`analyze`] lowercases and splits on anything that is not alphanumeric.
//!   It produces index terms for BM25 and TF-IDF, and the tokens compared by
//!   fuzzy matching.

/// Name recorded in corpus manifests for the chunk token counter.
pub const WHITESPACE_TOKENIZER: &str = "unicode-whitespace-v1";

/// A token with its character (Unicode scalar) offsets into the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

/// Whitespace tokens of `text` as character offset spans.
pub fn whitespace_tokens(text: &str) -> Vec<TokenSpan> {
    let mut spans = Vec::new();
    let mut start = None;
    let mut pos = 0;
    for ch in text.chars() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push(TokenSpan { start: s, end: pos });
            }
        } else if start.is_none() {
            start = Some(pos);
        }
        pos += 1;
    }
    if let Some(s) = start {
        spans.push(TokenSpan { start: s, end: pos });
    }
    spans
}

pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Index terms: lowercase alphanumeric runs.
pub fn analyze(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

/// Slice `text` by character offsets.
pub(crate) fn char_slice(text: &str, start: usize, end: usize) -> &str {
    let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let b_start = indices.by_ref().nth(start).unwrap_or(text.len());
    let b_end = if end == start { b_start } else { indices.nth(end - start - 1).unwrap_or(text.len()) };
    &text[b_start..b_end]
}
