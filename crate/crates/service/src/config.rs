//! Service configuration: one TOML file plus environment overrides.
//!
//! ```toml
//! listen = "127.0.0.1:8080"
//! index_path = "data/shingrix.index"
//! corpus_path = "data/corpus.jsonl"
//! vaccine = "shingrix"
//! request_timeout_ms = 60000
//! max_concurrent_pipelines = 4
//! deterministic = false
//! api_token_env = "VAXRAG_SERVICE_TOKEN"
//!
//! [providers]
//! mode = "stub"            # or "remote"
//! embedding_dim = 1536
//!
//! [providers.chat]          # per-provider override
//! mode = "remote"
//! endpoint = { url = "http://llm:9000/chat", model = "gpt-4o" }
//!
//! [retrieval]
//! k_percent = 5.0
//!
//! [eval]
//! min_faithfulness = 0.9
//! ```
//!
//! Environment: `VAXRAG_LISTEN`, `VAXRAG_INDEX_PATH`, `VAXRAG_CORPUS_PATH`,
//! `VAXRAG_PROVIDER_MODE`. Secrets only ever come from the environment.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use vaxrag_core::eval::report::EvalThresholds;
use vaxrag_core::providers::remote::{
    EndpointConfig, RemoteBucketClassifier, RemoteChat, RemoteCompressor, RemoteEmbedder,
    RemoteReranker, RemoteVaccineExtractor,
};
use vaxrag_core::providers::stub::{
    AliasVaccineExtractor, EmbeddingCompressor, ExtractiveChat, HashedEmbedder,
    KeywordBucketClassifier, LexicalReranker,
};
use vaxrag_core::providers::{
    BucketClassifier, ChatProvider, Compressor, Embedder, ProviderError, Providers, Reranker,
    VaccineExtractor,
};
use vaxrag_core::{Clock, RetrievalConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("provider setup: {0}")]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderMode {
    #[default]
    Stub,
    Remote,
}

impl ProviderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ProviderMode::Stub => "stub",
            ProviderMode::Remote => "remote",
        }
    }
}

/// Per-provider override of the shared mode switch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSlot {
    pub mode: Option<ProviderMode>,
    pub endpoint: Option<EndpointConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProvidersConfig {
    pub mode: ProviderMode,
    pub embedding_dim: usize,
    pub embedder: ProviderSlot,
    pub reranker_small: ProviderSlot,
    pub reranker_large: ProviderSlot,
    pub compressor: ProviderSlot,
    pub chat: ProviderSlot,
    pub classifier: ProviderSlot,
    pub extractor: ProviderSlot,
}

impl Default for ProvidersConfig {
    fn default() -> Self {
        Self {
            mode: ProviderMode::Stub,
            embedding_dim: vaxrag_core::index::DEFAULT_DIM,
            embedder: ProviderSlot::default(),
            reranker_small: ProviderSlot::default(),
            reranker_large: ProviderSlot::default(),
            compressor: ProviderSlot::default(),
            chat: ProviderSlot::default(),
            classifier: ProviderSlot::default(),
            extractor: ProviderSlot::default(),
        }
    }
}

impl ProvidersConfig {
    fn slots(&self) -> [(&'static str, &ProviderSlot); 7] {
        [
            ("embedder", &self.embedder),
            ("reranker_small", &self.reranker_small),
            ("reranker_large", &self.reranker_large),
            ("compressor", &self.compressor),
            ("chat", &self.chat),
            ("classifier", &self.classifier),
            ("extractor", &self.extractor),
        ]
    }

    pub fn effective_mode(&self, slot: &ProviderSlot) -> ProviderMode {
        slot.mode.unwrap_or(self.mode)
    }

    /// "stub", "remote" or "mixed".
    pub fn mode_label(&self) -> &'static str {
        let modes: Vec<ProviderMode> = self
            .slots()
            .iter()
            .map(|(_, s)| self.effective_mode(s))
            .collect();
        if modes.iter().all(|m| *m == ProviderMode::Stub) {
            "stub"
        } else if modes.iter().all(|m| *m == ProviderMode::Remote) {
            "remote"
        } else {
            "mixed"
        }
    }

    fn endpoint(&self, name: &str, slot: &ProviderSlot) -> Result<EndpointConfig, ConfigError> {
        slot.endpoint
            .clone()
            .ok_or_else(|| ConfigError::Invalid(format!("providers.{name} is remote but has no endpoint")))
    }
}

/// Model-backed components for queries and for ingest.
#[derive(Clone)]
pub struct ProviderSet {
    pub providers: Providers,
    pub classifier: Arc<dyn BucketClassifier>,
    pub extractor: Arc<dyn VaccineExtractor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub index_path: PathBuf,
    pub corpus_path: PathBuf,
    pub vaccine: String,
    pub request_timeout_ms: u64,
    pub max_concurrent_pipelines: usize,
    /// Fixed timestamps and zero timings, for reproducible output.
    pub deterministic: bool,
    /// Environment variable holding a static bearer token. No auth when unset.
    pub api_token_env: Option<String>,
    pub providers: ProvidersConfig,
    pub retrieval: RetrievalConfig,
    pub eval: EvalThresholds,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            index_path: PathBuf::from("vaxrag.index"),
            corpus_path: PathBuf::from("corpus.jsonl"),
            vaccine: "shingrix".into(),
            request_timeout_ms: 60_000,
            max_concurrent_pipelines: 4,
            deterministic: false,
            api_token_env: None,
            providers: ProvidersConfig::default(),
            retrieval: RetrievalConfig::default(),
            eval: EvalThresholds::default(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(src: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(src)?)
    }

    /// Reads `path`, or the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let src = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.display().to_string(),
                    source,
                })?;
                Self::from_toml(&src)
            }
        }
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = lookup("VAXRAG_LISTEN") {
            self.listen = v;
        }
        if let Some(v) = lookup("VAXRAG_INDEX_PATH") {
            self.index_path = v.into();
        }
        if let Some(v) = lookup("VAXRAG_CORPUS_PATH") {
            self.corpus_path = v.into();
        }
        if let Some(v) = lookup("VAXRAG_PROVIDER_MODE") {
            self.providers.mode = match v.as_str() {
                "stub" => ProviderMode::Stub,
                "remote" => ProviderMode::Remote,
                other => {
                    return Err(ConfigError::Invalid(format!(
                        "VAXRAG_PROVIDER_MODE must be stub or remote, got {other:?}"
                    )))
                }
            };
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.listen
            .parse::<SocketAddr>()
            .map_err(|e| ConfigError::Invalid(format!("listen {:?}: {e}", self.listen)))?;
        if self.max_concurrent_pipelines == 0 {
            return Err(ConfigError::Invalid("max_concurrent_pipelines must be at least 1".into()));
        }
        if self.request_timeout_ms == 0 {
            return Err(ConfigError::Invalid("request_timeout_ms must be positive".into()));
        }
        if self.vaccine.trim().is_empty() {
            return Err(ConfigError::Invalid("vaccine must not be empty".into()));
        }
        if self.providers.embedding_dim == 0 {
            return Err(ConfigError::Invalid("providers.embedding_dim must be positive".into()));
        }
        self.retrieval
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, slot) in self.providers.slots() {
            if self.providers.effective_mode(slot) == ProviderMode::Remote {
                self.providers.endpoint(name, slot)?;
            }
        }
        Ok(())
    }

    pub fn clock(&self) -> Clock {
        if self.deterministic {
            Clock::frozen_epoch()
        } else {
            Clock::System
        }
    }

    pub fn api_token(&self) -> Option<String> {
        self.api_token_env
            .as_deref()
            .and_then(|name| std::env::var(name).ok())
            .filter(|t| !t.is_empty())
    }

    pub fn build_providers(&self) -> Result<ProviderSet, ConfigError> {
        self.validate()?;
        let p = &self.providers;
        let dim = p.embedding_dim;
        let remote = |slot: &ProviderSlot| p.effective_mode(slot) == ProviderMode::Remote;

        let embedder: Arc<dyn Embedder> = if remote(&p.embedder) {
            Arc::new(RemoteEmbedder::new(p.endpoint("embedder", &p.embedder)?, dim)?)
        } else {
            Arc::new(HashedEmbedder::new(dim))
        };
        let reranker: Arc<dyn Reranker> = match (remote(&p.reranker_small), remote(&p.reranker_large)) {
            (false, false) => Arc::new(LexicalReranker::new()),
            (true, true) => Arc::new(RemoteReranker::new(
                p.endpoint("reranker_small", &p.reranker_small)?,
                p.endpoint("reranker_large", &p.reranker_large)?,
            )?),
            _ => {
                return Err(ConfigError::Invalid(
                    "reranker_small and reranker_large must share a mode".into(),
                ))
            }
        };
        let compressor: Arc<dyn Compressor> = if remote(&p.compressor) {
            Arc::new(RemoteCompressor::new(p.endpoint("compressor", &p.compressor)?)?)
        } else {
            let floor = if remote(&p.embedder) { 0.0 } else { EmbeddingCompressor::HASHED_FLOOR };
            Arc::new(EmbeddingCompressor::with_floor(embedder.clone(), floor))
        };
        let chat: Arc<dyn ChatProvider> = if remote(&p.chat) {
            Arc::new(RemoteChat::new(p.endpoint("chat", &p.chat)?)?)
        } else {
            Arc::new(ExtractiveChat)
        };
        let classifier: Arc<dyn BucketClassifier> = if remote(&p.classifier) {
            Arc::new(RemoteBucketClassifier::new(p.endpoint("classifier", &p.classifier)?)?)
        } else {
            Arc::new(KeywordBucketClassifier::shipped())
        };
        let extractor: Arc<dyn VaccineExtractor> = if remote(&p.extractor) {
            Arc::new(RemoteVaccineExtractor::new(p.endpoint("extractor", &p.extractor)?)?)
        } else {
            Arc::new(AliasVaccineExtractor::shipped())
        };
        Ok(ProviderSet {
            providers: Providers {
                embedder,
                reranker,
                compressor,
                chat,
            },
            classifier,
            extractor,
        })
    }

    /// Echoes every effective setting into the log.
    pub fn log_effective(&self) {
        match serde_json::to_value(self) {
            Ok(v) => tracing::info!(config = %v, provider_mode = self.providers.mode_label(), "effective configuration"),
            Err(e) => tracing::warn!(%e, "cannot serialise configuration"),
        }
    }
}
