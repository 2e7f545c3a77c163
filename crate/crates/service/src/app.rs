//! Operations shared by the HTTP API and the CLI.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use vaxrag_core::answer::{formulate_answer, Answer, QueryRequest};
use vaxrag_core::corpus::{
    ingest, load_posts, read_corpus, write_corpus, Comment, CorpusError, IngestOptions,
    IngestReport, Platform,
};
use vaxrag_core::engine::{Engine, EngineError};
use vaxrag_core::eval::{run_eval, EvalOptions, EvalReport, SubstringJudge, TestCase};
use vaxrag_core::index::{IndexError, VectorIndex};
use vaxrag_core::retrieval::{DocStage, RankedDoc, RetrievalConfig, StageKind, StageRecord};

use crate::config::{ConfigError, ProviderSet, ServiceConfig};

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocScore {
    pub comment_id: String,
    pub retrieval_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rerank_score: Option<f64>,
    pub stage: DocStage,
}

impl From<&RankedDoc> for DocScore {
    fn from(d: &RankedDoc) -> Self {
        Self {
            comment_id: d.comment_id.clone(),
            retrieval_score: d.retrieval_score,
            rerank_score: d.rerank_score,
            stage: d.stage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub index_size: usize,
    pub population: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vaccine_filter: Option<String>,
    pub config: RetrievalConfig,
    pub stages: Vec<StageRecord>,
    pub iteration1: Vec<DocScore>,
    pub iteration2: Vec<DocScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub iteration: u8,
    pub stage: StageKind,
    pub elapsed_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stages: Vec<StageTiming>,
    pub answer_us: u64,
    pub total_us: u64,
}

/// A cited comment with its metadata, for evidence display.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportingComment {
    pub id: String,
    /// The text the answer was formulated from (possibly compressed).
    pub excerpt: String,
    /// Full cleaned comment text, when the corpus is loaded.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub platform: Option<Platform>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub created_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub answer: Answer,
    pub supporting_comments: Vec<SupportingComment>,
    pub retrieval_trace: TraceSummary,
    pub timing: Timing,
}

pub struct App {
    pub cfg: ServiceConfig,
    pub engine: Engine,
    pub providers: ProviderSet,
    comments: RwLock<BTreeMap<String, Comment>>,
    ingest_lock: Mutex<()>,
}

impl App {
    /// Builds providers and loads the index: restored from `index_path` when
    /// present, otherwise built from `corpus_path`, otherwise empty.
    pub fn from_config(cfg: ServiceConfig) -> Result<Self, AppError> {
        let providers = cfg.build_providers()?;
        Self::with_providers(cfg, providers)
    }

    /// Like [`App::from_config`] with caller-supplied providers.
    pub fn with_providers(cfg: ServiceConfig, providers: ProviderSet) -> Result<Self, AppError> {
        cfg.validate()?;
        let dim = cfg.providers.embedding_dim;
        let comments: BTreeMap<String, Comment> = if cfg.corpus_path.exists() {
            read_corpus(&cfg.corpus_path)?
                .into_iter()
                .map(|c| (c.id.clone(), c))
                .collect()
        } else {
            BTreeMap::new()
        };
        let index = if cfg.index_path.exists() {
            tracing::info!(path = %cfg.index_path.display(), "restoring index");
            VectorIndex::restore(&cfg.index_path, Some(dim))?
        } else {
            VectorIndex::new(dim)
        };
        let engine = Engine::new(index, providers.providers.clone(), cfg.retrieval, cfg.clock());
        let app = Self {
            cfg,
            engine,
            providers,
            comments: RwLock::new(comments),
            ingest_lock: Mutex::new(()),
        };
        if app.engine.index_size() == 0 {
            let specific = app.vaccine_specific_comments();
            if !specific.is_empty() {
                tracing::info!(count = specific.len(), "building index from corpus");
                app.engine.index_comments(&specific)?;
            } else {
                tracing::warn!("starting with an empty index");
            }
        }
        Ok(app)
    }

    pub fn corpus_len(&self) -> usize {
        self.comments.read().expect("corpus lock").len()
    }

    /// Corpus comments tagged with any vaccine, sorted by id.
    pub fn vaccine_specific_comments(&self) -> Vec<Comment> {
        self.comments
            .read()
            .expect("corpus lock")
            .values()
            .filter(|c| !c.vaccine_tags.is_empty())
            .cloned()
            .collect()
    }

    pub fn query(&self, request: &QueryRequest) -> Result<QueryResponse, EngineError> {
        let clock = self.engine.clock;
        let total = clock.stopwatch();
        let retrieval = self.engine.retrieve(request)?;
        let sw = clock.stopwatch();
        let answer = formulate_answer(
            request,
            &retrieval,
            self.engine.providers.chat.as_ref(),
            &self.engine.chat_retry,
            &clock,
        )
        .map_err(EngineError::from)?;
        let answer_us = sw.elapsed_us();

        let supporting_comments = {
            let comments = self.comments.read().expect("corpus lock");
            answer
                .supporting_ids
                .iter()
                .map(|id| {
                    let excerpt = answer
                        .context_used
                        .iter()
                        .find(|d| &d.comment_id == id)
                        .map(|d| d.text.clone())
                        .unwrap_or_default();
                    let meta = comments.get(id);
                    SupportingComment {
                        id: id.clone(),
                        excerpt,
                        text: meta.map(|c| c.text.clone()),
                        platform: meta.map(|c| c.platform),
                        created_at: meta.map(|c| c.created_at),
                    }
                })
                .collect()
        };
        let trace = &retrieval.trace;
        let timing = Timing {
            stages: trace
                .stages
                .iter()
                .map(|s| StageTiming {
                    iteration: s.iteration,
                    stage: s.stage,
                    elapsed_us: s.elapsed_us,
                })
                .collect(),
            answer_us,
            total_us: total.elapsed_us(),
        };
        Ok(QueryResponse {
            supporting_comments,
            retrieval_trace: TraceSummary {
                index_size: trace.index_size,
                population: trace.population,
                vaccine_filter: trace.vaccine_filter.clone(),
                config: trace.config,
                stages: trace.stages.clone(),
                iteration1: retrieval.iteration1.iter().map(DocScore::from).collect(),
                iteration2: retrieval.iteration2.iter().map(DocScore::from).collect(),
            },
            timing,
            answer,
        })
    }

    /// Loads and segregates a batch of posts, merges it into the corpus,
    /// indexes the vaccine-specific comments and persists both files.
    pub fn ingest_path(&self, path: &Path, vaccine: Option<&str>) -> Result<IngestReport, AppError> {
        let _writer = self.ingest_lock.lock().expect("ingest lock");
        let loaded = load_posts(path)?;
        let opts = IngestOptions {
            max_in_flight: self.cfg.retrieval.max_in_flight,
            ..IngestOptions::new(vaccine.unwrap_or(&self.cfg.vaccine))
        };
        let out = ingest(
            &loaded,
            self.providers.classifier.as_ref(),
            self.providers.extractor.as_ref(),
            &opts,
        );
        let specific: Vec<Comment> = out.vaccine_specific().cloned().collect();
        self.engine.index_comments(&specific)?;
        let snapshot: Vec<Comment> = {
            let mut comments = self.comments.write().expect("corpus lock");
            for c in out.comments {
                comments.insert(c.id.clone(), c);
            }
            comments.values().cloned().collect()
        };
        write_corpus(&self.cfg.corpus_path, &snapshot)?;
        self.engine.index().read().persist(&self.cfg.index_path)?;
        tracing::info!(report = ?out.report, "ingest complete");
        Ok(out.report)
    }

    pub fn eval(&self, cases: &[TestCase], max_in_flight: usize) -> EvalReport {
        let opts = EvalOptions {
            max_in_flight,
            ..EvalOptions::default()
        };
        run_eval(&self.engine, cases, &SubstringJudge, &opts)
    }
}
