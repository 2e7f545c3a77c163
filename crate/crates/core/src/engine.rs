//! Shared query engine: the index behind a reader-writer lock plus the
//! providers and defaults every request uses.

use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{formulate_answer, Answer, AnswerError, QueryRequest};
use crate::clock::Clock;
use crate::corpus::Comment;
use crate::index::{embed_batch, IndexError, VectorIndex};
use crate::providers::{ProviderError, Providers, RetryPolicy};
use crate::retrieval::{run_pipeline, RetrievalConfig, RetrievalError, RetrievalResult};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Answer(#[from] AnswerError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

impl EngineError {
    /// Whether the failure came from an unreachable model provider.
    pub fn is_provider_outage(&self) -> bool {
        let provider = match self {
            EngineError::Retrieval(RetrievalError::Embedding(e)) => e,
            EngineError::Answer(AnswerError::Provider(e)) => e,
            EngineError::Index(IndexError::Provider(e)) => e,
            _ => return false,
        };
        matches!(provider, ProviderError::Unavailable(_))
    }

    /// Whether the request itself was invalid.
    pub fn is_bad_request(&self) -> bool {
        matches!(
            self,
            EngineError::Retrieval(RetrievalError::EmptyQuery | RetrievalError::InvalidConfig(_))
                | EngineError::Answer(AnswerError::EmptyQuery)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub answer: Answer,
    pub retrieval: RetrievalResult,
}

#[derive(Clone)]
pub struct Engine {
    index: Arc<RwLock<VectorIndex>>,
    pub providers: Providers,
    pub config: RetrievalConfig,
    pub chat_retry: RetryPolicy,
    pub embed_batch_size: usize,
    pub clock: Clock,
}

impl Engine {
    pub fn new(index: VectorIndex, providers: Providers, config: RetrievalConfig, clock: Clock) -> Self {
        Self {
            index: Arc::new(RwLock::new(index)),
            providers,
            config,
            chat_retry: RetryPolicy::default(),
            embed_batch_size: 64,
            clock,
        }
    }

    pub fn index(&self) -> &Arc<RwLock<VectorIndex>> {
        &self.index
    }

    pub fn index_size(&self) -> usize {
        self.index.read().len()
    }

    pub fn retrieve(&self, request: &QueryRequest) -> Result<RetrievalResult, EngineError> {
        request.validate()?;
        let cfg = request.overrides.apply(&self.config)?;
        let index = self.index.read();
        Ok(run_pipeline(
            &request.query_text,
            &index,
            &self.providers,
            &cfg,
            request.vaccine_filter.as_deref(),
            &self.clock,
        )?)
    }

    pub fn query(&self, request: &QueryRequest) -> Result<QueryOutcome, EngineError> {
        let retrieval = self.retrieve(request)?;
        let answer = formulate_answer(
            request,
            &retrieval,
            self.providers.chat.as_ref(),
            &self.chat_retry,
            &self.clock,
        )?;
        Ok(QueryOutcome { answer, retrieval })
    }

    /// Embeds without holding the lock, then upserts under the write lock.
    pub fn index_comments(&self, comments: &[Comment]) -> Result<usize, EngineError> {
        let texts: Vec<String> = comments.iter().map(|c| c.text.clone()).collect();
        let vectors = embed_batch(&texts, self.providers.embedder.as_ref(), self.embed_batch_size)?;
        let mut index = self.index.write();
        for (c, v) in comments.iter().zip(vectors) {
            index.upsert(
                c.id.clone(),
                c.text.clone(),
                c.vaccine_tags.iter().cloned().collect(),
                v,
            )?;
        }
        Ok(comments.len())
    }

    pub fn replace_index(&self, index: VectorIndex) {
        *self.index.write() = index;
    }
}
