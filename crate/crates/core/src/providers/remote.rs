//! JSON-over-HTTP adapters for hosted models.
//!
//! Wire formats:
//!
//! | provider   | request                               | response                    |
//! |------------|---------------------------------------|-----------------------------|
//! | embedder   | `{model, inputs: [string]}`           | `{vectors: [[float]]}`      |
//! | reranker   | `{query, passages: [string]}`         | `{scores: [float]}`         |
//! | compressor | `{query, passage, threshold}`         | `{kept_sentences: [string]}`|
//! | chat       | `{model, system, user}`               | `{text}`                    |
//! | classifier | `{text}`                              | `{bucket}`                  |
//! | extractor  | `{text, vaccine}`                     | `{relevant: bool}`          |
//!
//! The API key, when the named environment variable is set, is sent as a
//! bearer token.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    BucketClassifier, ChatProvider, ChatRequest, Compressor, Embedder, ProviderError,
    RerankTier, Reranker, RetryPolicy, VaccineExtractor,
};
use crate::corpus::Bucket;

pub const DEFAULT_API_KEY_ENV: &str = "VAXRAG_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: String,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

fn default_timeout_ms() -> u64 {
    30_000
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: None,
            api_key_env: default_key_env(),
            timeout_ms: default_timeout_ms(),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone)]
struct HttpJson {
    cfg: EndpointConfig,
    client: reqwest::blocking::Client,
}

impl HttpJson {
    fn new(cfg: EndpointConfig) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| ProviderError::Unavailable(format!("http client: {e}")))?;
        Ok(Self { cfg, client })
    }

    fn model(&self) -> &str {
        self.cfg.model.as_deref().unwrap_or("default")
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, body: &Req) -> Result<Resp, ProviderError> {
        self.cfg.retry.run(|| self.post_once(body))
    }

    fn post_once<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        body: &Req,
    ) -> Result<Resp, ProviderError> {
        let mut req = self.client.post(&self.cfg.url).json(body);
        if let Ok(key) = std::env::var(&self.cfg.api_key_env) {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| ProviderError::Unavailable(format!("{}: {e}", self.cfg.url)))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(ProviderError::Unavailable(format!("{}: HTTP {status}", self.cfg.url)));
        }
        if !status.is_success() {
            return Err(ProviderError::Rejected(format!("{}: HTTP {status}", self.cfg.url)));
        }
        resp.json::<Resp>()
            .map_err(|e| ProviderError::InvalidResponse(format!("{}: {e}", self.cfg.url)))
    }
}

pub struct RemoteEmbedder {
    http: HttpJson,
    dim: usize,
}

impl RemoteEmbedder {
    pub fn new(cfg: EndpointConfig, dim: usize) -> Result<Self, ProviderError> {
        Ok(Self {
            http: HttpJson::new(cfg)?,
            dim,
        })
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    inputs: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn model_id(&self) -> &str {
        self.http.model()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        let resp: EmbedResponse = self.http.post(&EmbedRequest {
            model: self.http.model(),
            inputs: texts,
        })?;
        if resp.vectors.len() != texts.len() {
            return Err(ProviderError::InvalidResponse(format!(
                "expected {} vectors, got {}",
                texts.len(),
                resp.vectors.len()
            )));
        }
        if let Some(bad) = resp.vectors.iter().find(|v| v.len() != self.dim) {
            return Err(ProviderError::InvalidResponse(format!(
                "vector of length {} (expected {})",
                bad.len(),
                self.dim
            )));
        }
        Ok(resp.vectors)
    }
}

/// Routes small candidate sets and large ones to separate scoring endpoints.
pub struct RemoteReranker {
    small: HttpJson,
    large: HttpJson,
}

impl RemoteReranker {
    pub fn new(small: EndpointConfig, large: EndpointConfig) -> Result<Self, ProviderError> {
        Ok(Self {
            small: HttpJson::new(small)?,
            large: HttpJson::new(large)?,
        })
    }
}

#[derive(Serialize)]
struct RerankRequest<'a> {
    query: &'a str,
    passages: &'a [&'a str],
}

#[derive(Deserialize)]
struct RerankResponse {
    scores: Vec<f32>,
}

impl Reranker for RemoteReranker {
    fn score(
        &self,
        query: &str,
        passages: &[&str],
        tier: RerankTier,
    ) -> Result<Vec<f32>, ProviderError> {
        let http = match tier {
            RerankTier::Small => &self.small,
            RerankTier::Large => &self.large,
        };
        let resp: RerankResponse = http.post(&RerankRequest { query, passages })?;
        if resp.scores.len() != passages.len() {
            return Err(ProviderError::InvalidResponse(format!(
                "expected {} scores, got {}",
                passages.len(),
                resp.scores.len()
            )));
        }
        Ok(resp.scores)
    }
}

pub struct RemoteCompressor {
    http: HttpJson,
}

impl RemoteCompressor {
    pub fn new(cfg: EndpointConfig) -> Result<Self, ProviderError> {
        Ok(Self {
            http: HttpJson::new(cfg)?,
        })
    }
}

#[derive(Serialize)]
struct CompressRequest<'a> {
    query: &'a str,
    passage: &'a str,
    threshold: f64,
}

#[derive(Deserialize)]
struct CompressResponse {
    kept_sentences: Vec<String>,
}

impl Compressor for RemoteCompressor {
    fn compress(
        &self,
        query: &str,
        passage: &str,
        threshold: f64,
    ) -> Result<Vec<String>, ProviderError> {
        let resp: CompressResponse = self.http.post(&CompressRequest {
            query,
            passage,
            threshold,
        })?;
        Ok(resp.kept_sentences)
    }
}

pub struct RemoteChat {
    http: HttpJson,
}

impl RemoteChat {
    pub fn new(cfg: EndpointConfig) -> Result<Self, ProviderError> {
        Ok(Self {
            http: HttpJson::new(cfg)?,
        })
    }
}

#[derive(Serialize)]
struct ChatWireRequest<'a> {
    model: &'a str,
    system: &'a str,
    user: &'a str,
}

#[derive(Deserialize)]
struct ChatWireResponse {
    text: String,
}

impl ChatProvider for RemoteChat {
    fn model_id(&self) -> &str {
        self.http.model()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let resp: ChatWireResponse = self.http.post(&ChatWireRequest {
            model: self.http.model(),
            system: &request.system,
            user: &request.user,
        })?;
        Ok(resp.text)
    }
}

pub struct RemoteBucketClassifier {
    http: HttpJson,
}

impl RemoteBucketClassifier {
    pub fn new(cfg: EndpointConfig) -> Result<Self, ProviderError> {
        Ok(Self {
            http: HttpJson::new(cfg)?,
        })
    }
}

#[derive(Serialize)]
struct ClassifyRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct ClassifyResponse {
    bucket: Bucket,
}

impl BucketClassifier for RemoteBucketClassifier {
    fn classify(&self, text: &str) -> Result<Bucket, ProviderError> {
        // Single attempt: the ingest loop owns the retry budget for classification.
        let resp: ClassifyResponse = self.http.post_once(&ClassifyRequest { text })?;
        Ok(resp.bucket)
    }
}

pub struct RemoteVaccineExtractor {
    http: HttpJson,
}

impl RemoteVaccineExtractor {
    pub fn new(cfg: EndpointConfig) -> Result<Self, ProviderError> {
        Ok(Self {
            http: HttpJson::new(cfg)?,
        })
    }
}

#[derive(Serialize)]
struct ExtractRequest<'a> {
    text: &'a str,
    vaccine: &'a str,
}

#[derive(Deserialize)]
struct ExtractResponse {
    relevant: bool,
}

impl VaccineExtractor for RemoteVaccineExtractor {
    fn concerns(&self, text: &str, vaccine: &str) -> Result<bool, ProviderError> {
        let resp: ExtractResponse = self.http.post_once(&ExtractRequest { text, vaccine })?;
        Ok(resp.relevant)
    }
}
