//! HTTP API consumed by the query UI.
//!
//! Pipelines run on the blocking pool behind a semaphore sized by
//! `max_concurrent_pipelines`; excess requests queue instead of failing.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use vaxrag_core::answer::{mode_descriptors, QueryRequest};
use vaxrag_core::eval::read_testcases;

use crate::app::{App, AppError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
    /// Set when a model provider is unreachable and the UI should show a
    /// degraded-service notice.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.into(),
                fields: Vec::new(),
                degraded: false,
            },
        }
    }

    fn bad_field(field: String, message: String) -> Self {
        let mut e = Self::new(StatusCode::BAD_REQUEST, "invalid request body");
        e.body.fields.push(FieldError { field, message });
        e
    }

    fn degraded(error: impl Into<String>) -> Self {
        let mut e = Self::new(StatusCode::SERVICE_UNAVAILABLE, error);
        e.body.degraded = true;
        e
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<AppError> for ApiError {
    fn from(e: AppError) -> Self {
        match &e {
            AppError::Engine(inner) if inner.is_provider_outage() => ApiError::degraded(e.to_string()),
            AppError::Engine(inner) if inner.is_bad_request() => {
                ApiError::new(StatusCode::BAD_REQUEST, e.to_string())
            }
            AppError::Corpus(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        }
    }
}

/// Parses a JSON body, reporting the offending field path on failure.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    if body.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "request body is empty"));
    }
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { String::new() } else { path };
        ApiError::bad_field(field, e.inner().to_string())
    })
}

pub struct AppState {
    pub app: Arc<App>,
    limiter: Arc<Semaphore>,
    max_permits: u32,
    in_flight: Arc<AtomicUsize>,
    peak_in_flight: Arc<AtomicUsize>,
    token: Option<String>,
    timeout: Duration,
}

impl AppState {
    pub fn new(app: App) -> Self {
        let max = app.cfg.max_concurrent_pipelines.max(1);
        let token = app.cfg.api_token();
        let timeout = Duration::from_millis(app.cfg.request_timeout_ms);
        Self {
            app: Arc::new(app),
            limiter: Arc::new(Semaphore::new(max)),
            max_permits: max as u32,
            in_flight: Arc::new(AtomicUsize::new(0)),
            peak_in_flight: Arc::new(AtomicUsize::new(0)),
            token,
            timeout,
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    /// Runs `work` on the blocking pool under `permits` permits, bounded by
    /// the request timeout. Permits are held until the work actually ends,
    /// even after a timeout has answered the client.
    async fn run_limited<T, F>(&self, permits: u32, work: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&App) -> T + Send + 'static,
    {
        let permit = self
            .limiter
            .clone()
            .acquire_many_owned(permits)
            .await
            .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "shutting down"))?;
        let app = self.app.clone();
        let gauge = InFlight::enter(self.in_flight.clone(), &self.peak_in_flight);
        let handle = tokio::task::spawn_blocking(move || {
            let _permit = permit;
            let _gauge = gauge;
            work(&app)
        });
        match tokio::time::timeout(self.timeout, handle).await {
            Ok(Ok(v)) => Ok(v),
            Ok(Err(join)) => Err(ApiError::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                format!("pipeline task failed: {join}"),
            )),
            Err(_) => Err(ApiError::new(StatusCode::GATEWAY_TIMEOUT, "request timed out")),
        }
    }
}

struct InFlight(Arc<AtomicUsize>);

impl InFlight {
    fn enter(counter: Arc<AtomicUsize>, peak: &AtomicUsize) -> Self {
        let now = counter.fetch_add(1, Ordering::SeqCst) + 1;
        peak.fetch_max(now, Ordering::SeqCst);
        Self(counter)
    }
}

impl Drop for InFlight {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthBody {
    pub status: String,
    pub index_size: usize,
    pub corpus_size: usize,
    pub provider_mode: String,
    pub in_flight: usize,
    pub peak_in_flight: usize,
    pub max_concurrent_pipelines: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestBody {
    pub path: PathBuf,
    #[serde(default)]
    pub vaccine: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalBody {
    pub testcase_path: PathBuf,
    #[serde(default)]
    pub max_in_flight: Option<usize>,
}

pub fn router(state: AppState) -> Router {
    let state = Arc::new(state);
    let protected = Router::new()
        .route("/modes", get(modes))
        .route("/query", post(query))
        .route("/ingest", post(ingest))
        .route("/eval/run", post(eval_run))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/health", get(health))
        .merge(protected)
        .with_state(state)
}

async fn require_token(
    State(state): State<Arc<AppState>>,
    req: Request,
    next: Next,
) -> Response {
    if let Some(expected) = &state.token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(expected.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token")
                .into_response();
        }
    }
    next.run(req).await
}

async fn health(State(state): State<Arc<AppState>>) -> Json<HealthBody> {
    Json(HealthBody {
        status: "ok".into(),
        index_size: state.app.engine.index_size(),
        corpus_size: state.app.corpus_len(),
        provider_mode: state.app.cfg.providers.mode_label().into(),
        in_flight: state.in_flight.load(Ordering::SeqCst),
        peak_in_flight: state.peak_in_flight(),
        max_concurrent_pipelines: state.max_permits as usize,
    })
}

async fn modes() -> impl IntoResponse {
    Json(mode_descriptors())
}

async fn query(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let request: QueryRequest = parse_body(&body)?;
    request
        .validate()
        .map_err(|e| ApiError::bad_field("query_text".into(), e.to_string()))?;
    request
        .overrides
        .apply(&state.app.cfg.retrieval)
        .map_err(|e| ApiError::bad_field("overrides".into(), e.to_string()))?;
    tracing::info!(mode = request.mode.as_str(), "query received");
    let outcome = state
        .run_limited(1, move |app| app.query(&request))
        .await?;
    match outcome {
        Ok(resp) => Ok(Json(resp).into_response()),
        Err(e) => {
            tracing::warn!(error = %e, "query failed");
            Err(AppError::from(e).into())
        }
    }
}

async fn ingest(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: IngestBody = parse_body(&body)?;
    let report = state
        .run_limited(1, move |app| app.ingest_path(&req.path, req.vaccine.as_deref()))
        .await??;
    Ok(Json(report).into_response())
}

async fn eval_run(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: EvalBody = parse_body(&body)?;
    let cases = read_testcases(&req.testcase_path)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let fan_out = req
        .max_in_flight
        .unwrap_or(state.app.cfg.retrieval.max_in_flight)
        .max(1);
    // An evaluation owns every pipeline slot so it cannot starve queries
    // partway through; queries queue behind it.
    let permits = state.max_permits;
    let report = state
        .run_limited(permits, move |app| app.eval(&cases, fan_out))
        .await?;
    Ok(Json(report).into_response())
}

/// Binds and serves until ctrl-c.
pub async fn serve(state: AppState) -> anyhow::Result<()> {
    let addr = state.app.cfg.listen.clone();
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutdown requested");
        })
        .await?;
    Ok(())
}
