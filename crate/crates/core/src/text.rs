//! Tokenisation, sentence splitting and normalisation shared by the stub
//! providers, the compressor and the substring judge.
//!
//! Everything here is deterministic and allocation-light; the same splitter is
//! used when compressing documents and when the evaluation judge decomposes
//! answers into claims, so a sentence copied verbatim out of a context always
//! re-splits into itself.

use std::sync::LazyLock;

use regex::Regex;

const STOPWORDS: &[&str] = &[
    "a", "about", "all", "also", "am", "an", "and", "any", "are", "as", "at", "be", "been",
    "but", "by", "can", "could", "did", "do", "does", "for", "from", "had", "has", "have",
    "he", "her", "him", "his", "how", "i", "if", "in", "into", "is", "it", "its", "just",
    "me", "my", "of", "on", "or", "our", "she", "so", "than", "that", "the", "their",
    "them", "then", "there", "these", "they", "this", "those", "to", "too", "us", "very",
    "was", "we", "were", "what", "when", "where", "which", "while", "who", "why", "will",
    "with", "would", "you", "your",
];

static CITATION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\[comment:([^\]\s]+)\]").expect("citation regex"));

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Lowercased alphanumeric tokens (apostrophes are dropped, so "don't" -> "dont").
pub fn tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if ch == '\'' || ch == '\u{2019}' {
            continue;
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Tokens with stopwords removed. Falls back to all tokens when every token
/// is a stopword, so non-trivial text never yields an empty set.
pub fn content_tokens(text: &str) -> Vec<String> {
    let all = tokens(text);
    let content: Vec<String> = all.iter().filter(|t| !is_stopword(t)).cloned().collect();
    if content.is_empty() {
        all
    } else {
        content
    }
}

/// Splits on `.`, `!`, `?` runs followed by whitespace (or end of text) and on
/// newlines. Sentences are returned trimmed and never empty.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut iter = text.char_indices().peekable();
    while let Some((i, ch)) = iter.next() {
        let boundary_end = if ch == '\n' {
            Some(i)
        } else if matches!(ch, '.' | '!' | '?') {
            let mut end = i + ch.len_utf8();
            while let Some(&(j, c)) = iter.peek() {
                if matches!(c, '.' | '!' | '?') {
                    end = j + c.len_utf8();
                    iter.next();
                } else {
                    break;
                }
            }
            match iter.peek() {
                None => Some(end),
                Some(&(_, c)) if c.is_whitespace() => Some(end),
                _ => None,
            }
        } else {
            None
        };
        if let Some(end) = boundary_end {
            let piece = text[start..end].trim();
            if !piece.is_empty() {
                out.push(piece);
            }
            start = if ch == '\n' { i + 1 } else { end };
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Lowercase, every non-alphanumeric run collapsed to one space, trimmed.
/// Used for substring containment checks.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(ch.to_lowercase());
        } else {
            pending_space = true;
        }
    }
    out
}

/// `[comment:{id}]` citation ids in order of appearance (duplicates kept).
pub fn citation_ids(text: &str) -> Vec<String> {
    CITATION
        .captures_iter(text)
        .map(|c| c[1].to_string())
        .collect()
}

pub fn citation_tag(id: &str) -> String {
    format!("[comment:{id}]")
}

/// Splits text into segments at citation tags and line breaks, dropping the
/// tags and any leading list markers.
pub fn strip_citations(text: &str) -> Vec<String> {
    CITATION
        .split(text)
        .flat_map(|seg| seg.lines().map(str::to_string).collect::<Vec<_>>())
        .map(|line| {
            line.trim()
                .trim_start_matches(['-', '*', '\u{2022}'])
                .trim()
                .to_string()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

/// 64-bit FNV-1a. Stable across platforms and toolchains, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}
