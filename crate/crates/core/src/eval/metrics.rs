//! The four evaluation metrics.
//!
//! Every metric returns a [`MetricValue`]. A degenerate value means the
//! metric is undefined for the input (no claims, no ground-truth sentences,
//! a failed judge or generator); it scores 0, stays in averages and is
//! counted separately in reports.

use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use super::judge::RelevanceJudge;
use crate::index::cosine;
use crate::prompt::Template;
use crate::providers::{ChatProvider, ChatRequest, ChatTask, Embedder};
use crate::text::split_sentences;

pub const DEFAULT_REGENERATED_QUESTIONS: usize = 3;

static REGENERATE_TEMPLATE: LazyLock<Template> = LazyLock::new(|| {
    Template::parse(
        "eval/regenerate_questions.v1",
        include_str!("../../templates/eval/regenerate_questions.v1.txt"),
    )
    .expect("shipped regeneration template parses")
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub score: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl MetricValue {
    pub fn ok(score: f64) -> Self {
        Self {
            score: score.clamp(0.0, 1.0),
            degenerate: false,
            reason: None,
        }
    }

    pub fn degenerate(reason: impl Into<String>) -> Self {
        Self {
            score: 0.0,
            degenerate: true,
            reason: Some(reason.into()),
        }
    }

}

/// Rank-weighted precision over per-chunk relevance flags:
/// `Σ_k precision@k · v_k / max(1, Σ_k v_k)`.
pub fn precision_from_flags(flags: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (k, &v) in flags.iter().enumerate() {
        if v {
            hits += 1;
            acc += hits as f64 / (k + 1) as f64;
        }
    }
    acc / hits.max(1) as f64
}

/// An empty retrieval scores a genuine 0.
pub fn context_precision(
    retrieved: &[&str],
    ground_truth: &str,
    judge: &dyn RelevanceJudge,
) -> MetricValue {
    let flags: Result<Vec<bool>, _> = retrieved
        .iter()
        .map(|c| judge.is_relevant(c, ground_truth))
        .collect();
    match flags {
        Ok(f) => MetricValue::ok(precision_from_flags(&f)),
        Err(e) => MetricValue::degenerate(format!("judge failed: {e}")),
    }
}

/// Fraction of ground-truth sentences attributable to the retrieved contexts.
pub fn context_recall(
    retrieved: &[&str],
    ground_truth: &str,
    judge: &dyn RelevanceJudge,
) -> MetricValue {
    let sentences = split_sentences(ground_truth);
    if sentences.is_empty() {
        return MetricValue::degenerate("ground truth has no sentences");
    }
    if retrieved.is_empty() {
        return MetricValue::ok(0.0);
    }
    let mut attributed = 0usize;
    for s in &sentences {
        match judge.is_supported(s, retrieved) {
            Ok(true) => attributed += 1,
            Ok(false) => {}
            Err(e) => return MetricValue::degenerate(format!("judge failed: {e}")),
        }
    }
    MetricValue::ok(attributed as f64 / sentences.len() as f64)
}

/// Supported claims over total claims.
pub fn faithfulness(answer: &str, contexts: &[&str], judge: &dyn RelevanceJudge) -> MetricValue {
    let claims = match judge.claims(answer) {
        Ok(c) => c,
        Err(e) => return MetricValue::degenerate(format!("judge failed: {e}")),
    };
    if claims.is_empty() {
        return MetricValue::degenerate("answer has no claims");
    }
    let mut supported = 0usize;
    for c in &claims {
        match judge.is_supported(c, contexts) {
            Ok(true) => supported += 1,
            Ok(false) => {}
            Err(e) => return MetricValue::degenerate(format!("judge failed: {e}")),
        }
    }
    MetricValue::ok(supported as f64 / claims.len() as f64)
}

/// Mean of the cosines with negatives clamped to 0. `None` for no input.
pub fn mean_clamped(cosines: &[f64]) -> Option<f64> {
    if cosines.is_empty() {
        return None;
    }
    Some(cosines.iter().map(|c| c.max(0.0)).sum::<f64>() / cosines.len() as f64)
}

/// Regenerates `m` questions from the answer and averages their clamped
/// cosine similarity to the original question.
pub fn answer_relevancy(
    question: &str,
    answer: &str,
    generator: &dyn ChatProvider,
    embedder: &dyn Embedder,
    m: usize,
) -> MetricValue {
    if answer.trim().is_empty() {
        return MetricValue::degenerate("empty answer");
    }
    let count = m.to_string();
    let prompt = REGENERATE_TEMPLATE.render(&[("answer", answer), ("count", &count)]);
    let request = ChatRequest {
        system: prompt.system,
        user: prompt.user,
        task: ChatTask::RegenerateQuestions {
            answer: answer.to_string(),
            count: m,
        },
    };
    let generated = match generator.complete(&request) {
        Ok(text) => text,
        Err(e) => return MetricValue::degenerate(format!("generator failed: {e}")),
    };
    let mut inputs = vec![question.to_string()];
    inputs.extend(
        generated
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .take(m)
            .map(str::to_string),
    );
    if inputs.len() == 1 {
        return MetricValue::degenerate("generator returned no questions");
    }
    let vectors = match embedder.embed(&inputs) {
        Ok(v) if v.len() == inputs.len() => v,
        Ok(_) => return MetricValue::degenerate("embedder returned the wrong number of vectors"),
        Err(e) => return MetricValue::degenerate(format!("embedder failed: {e}")),
    };
    let cosines: Result<Vec<f64>, _> = vectors[1..].iter().map(|v| cosine(&vectors[0], v)).collect();
    match cosines {
        Ok(c) => MetricValue::ok(mean_clamped(&c).expect("non-empty")),
        Err(e) => MetricValue::degenerate(format!("cosine failed: {e}")),
    }
}
