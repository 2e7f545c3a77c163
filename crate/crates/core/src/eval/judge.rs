use crate::providers::ProviderError;
use crate::text::{normalize, split_sentences, strip_citations};

/// Relevance and support decisions behind the four metrics.
pub trait RelevanceJudge: Send + Sync {
    /// Whether a retrieved chunk is relevant to the ground-truth answer.
    fn is_relevant(&self, chunk: &str, ground_truth: &str) -> Result<bool, ProviderError>;

    /// Whether a statement can be attributed to any of the contexts.
    fn is_supported(&self, statement: &str, contexts: &[&str]) -> Result<bool, ProviderError>;

    /// Atomic claims of an answer.
    fn claims(&self, answer: &str) -> Result<Vec<String>, ProviderError>;
}

/// Deterministic judge based on normalised substring containment.
///
/// * A statement is supported iff its normalised form is a substring of some
///   normalised context.
/// * A chunk is relevant iff one of its sentences is contained in the ground
///   truth, or one ground-truth sentence is contained in the chunk.
/// * Claims are the sentences of the answer after citation tags and list
///   markers are removed.
#[derive(Debug, Clone, Copy, Default)]
pub struct SubstringJudge;

fn normalized_sentences(text: &str) -> Vec<String> {
    split_sentences(text)
        .into_iter()
        .map(normalize)
        .filter(|s| !s.is_empty())
        .collect()
}

impl RelevanceJudge for SubstringJudge {
    fn is_relevant(&self, chunk: &str, ground_truth: &str) -> Result<bool, ProviderError> {
        let chunk_n = normalize(chunk);
        let gt_n = normalize(ground_truth);
        Ok(normalized_sentences(chunk).iter().any(|s| gt_n.contains(s.as_str()))
            || normalized_sentences(ground_truth)
                .iter()
                .any(|s| chunk_n.contains(s.as_str())))
    }

    fn is_supported(&self, statement: &str, contexts: &[&str]) -> Result<bool, ProviderError> {
        let s = normalize(statement);
        if s.is_empty() {
            return Ok(false);
        }
        Ok(contexts.iter().any(|c| normalize(c).contains(&s)))
    }

    fn claims(&self, answer: &str) -> Result<Vec<String>, ProviderError> {
        Ok(strip_citations(answer)
            .iter()
            .flat_map(|seg| {
                split_sentences(seg)
                    .into_iter()
                    .filter(|s| !normalize(s).is_empty())
                    .map(str::to_string)
                    .collect::<Vec<_>>()
            })
            .collect())
    }
}
