//! Provider interfaces for every model-backed step of the pipeline.
//!
//! Each trait has a deterministic offline implementation in [`stub`] and a
//! JSON-over-HTTP adapter in [`remote`]. Calls are blocking; callers fan out
//! with [`crate::concurrency::bounded_map`] where the step allows it.

pub mod remote;
pub mod stub;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::OutputMode;
use crate::corpus::Bucket;
use crate::eval::Difficulty;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    /// Transport failure, timeout or 5xx. Worth retrying.
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("invalid provider response: {0}")]
    InvalidResponse(String),
    #[error("provider rejected input: {0}")]
    Rejected(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Unavailable(_))
    }
}

/// Exponential backoff for retryable provider errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    #[serde(with = "millis")]
    pub initial_backoff: Duration,
    #[serde(with = "millis")]
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_millis(200),
            max_backoff: Duration::from_secs(5),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            initial_backoff: Duration::ZERO,
            max_backoff: Duration::ZERO,
        }
    }

    pub fn immediate(max_retries: u32) -> Self {
        Self {
            max_retries,
            initial_backoff: Duration::ZERO,
            max_backoff: Duration::ZERO,
        }
    }

    pub fn run<T>(
        &self,
        mut call: impl FnMut() -> Result<T, ProviderError>,
    ) -> Result<T, ProviderError> {
        let mut backoff = self.initial_backoff;
        let mut attempt = 0;
        loop {
            match call() {
                Ok(v) => return Ok(v),
                Err(err) if err.is_retryable() && attempt < self.max_retries => {
                    attempt += 1;
                    tracing::debug!(%err, attempt, "retrying provider call");
                    if !backoff.is_zero() {
                        std::thread::sleep(backoff);
                    }
                    backoff = (backoff * 2).min(self.max_backoff);
                }
                Err(err) => return Err(err),
            }
        }
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// First step of segregation: assign one of three buckets.
pub trait BucketClassifier: Send + Sync {
    fn classify(&self, text: &str) -> Result<Bucket, ProviderError>;
}

/// Second step of segregation: does this text concern the named vaccine?
pub trait VaccineExtractor: Send + Sync {
    fn concerns(&self, text: &str, vaccine: &str) -> Result<bool, ProviderError>;
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn model_id(&self) -> &str;
    /// One vector of length `dim()` per input text.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError>;
}

/// Which scoring model a rerank call routes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankTier {
    /// Lightweight cross-encoder for small candidate sets.
    Small,
    /// Heavier listwise/seq2seq scorer for large candidate sets.
    Large,
}

pub trait Reranker: Send + Sync {
    /// One relevance score per passage, same order as `passages`.
    fn score(&self, query: &str, passages: &[&str], tier: RerankTier)
        -> Result<Vec<f32>, ProviderError>;
}

pub trait Compressor: Send + Sync {
    /// Sentences of `passage` whose relevance to `query` is at least `threshold`,
    /// in passage order.
    fn compress(&self, query: &str, passage: &str, threshold: f64)
        -> Result<Vec<String>, ProviderError>;
}

/// A context passage handed to a chat provider alongside the rendered prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub text: String,
}

/// What a chat call is for. Remote providers only see `system`/`user`; the
/// structured task lets offline providers answer without parsing prompts.
#[derive(Debug, Clone, PartialEq)]
pub enum ChatTask {
    Answer {
        mode: OutputMode,
        query: String,
        passages: Vec<Passage>,
    },
    GenerateTestCase {
        mode: OutputMode,
        difficulty: Difficulty,
        passages: Vec<Passage>,
    },
    RegenerateQuestions {
        answer: String,
        count: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub task: ChatTask,
}

pub trait ChatProvider: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError>;
}

/// The model-backed providers a query needs, shared across requests.
#[derive(Clone)]
pub struct Providers {
    pub embedder: Arc<dyn Embedder>,
    pub reranker: Arc<dyn Reranker>,
    pub compressor: Arc<dyn Compressor>,
    pub chat: Arc<dyn ChatProvider>,
}

impl Providers {
    /// Fully offline set: hashed embedder, lexical reranker, calibrated
    /// embedding compressor and the extractive chat model.
    pub fn stub(dim: usize) -> Self {
        let embedder: Arc<dyn Embedder> = Arc::new(stub::HashedEmbedder::new(dim));
        Self {
            compressor: Arc::new(stub::EmbeddingCompressor::with_floor(
                embedder.clone(),
                stub::EmbeddingCompressor::HASHED_FLOOR,
            )),
            embedder,
            reranker: Arc::new(stub::LexicalReranker::new()),
            chat: Arc::new(stub::ExtractiveChat),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn retries_only_retryable_errors() {
        let calls = Cell::new(0);
        let out: Result<(), _> = RetryPolicy::immediate(2).run(|| {
            calls.set(calls.get() + 1);
            Err(ProviderError::Unavailable("down".into()))
        });
        assert!(out.is_err());
        assert_eq!(calls.get(), 3);

        calls.set(0);
        let out: Result<(), _> = RetryPolicy::immediate(5).run(|| {
            calls.set(calls.get() + 1);
            Err(ProviderError::InvalidResponse("bad".into()))
        });
        assert!(out.is_err());
        assert_eq!(calls.get(), 1);
    }

    #[test]
    fn recovers_after_transient_failure() {
        let calls = Cell::new(0);
        let out = RetryPolicy::immediate(3).run(|| {
            calls.set(calls.get() + 1);
            if calls.get() < 3 {
                Err(ProviderError::Unavailable("blip".into()))
            } else {
                Ok(7)
            }
        });
        assert_eq!(out, Ok(7));
    }
}
