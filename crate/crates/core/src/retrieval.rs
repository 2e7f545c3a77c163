//! Two-iteration context refinement.
//!
//! Iteration 1: top-k% cosine search → long-context reorder → size-routed
//! rerank (skipped below `rerank_min_docs`).
//!
//! Iteration 2: keep the top `second_pass_fraction` of iteration 1 → compress
//! each doc to its query-relevant sentences → reorder → rerank.
//!
//! Every stage appends a [`StageRecord`] to the trace, including skipped and
//! degraded ones.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::concurrency::bounded_map;
use crate::index::{ceil_count, IndexError, VectorIndex, DEFAULT_K_PERCENT};
use crate::providers::{Compressor, ProviderError, Providers, RerankTier, Reranker};
use crate::text::split_sentences;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
    #[error("query text is empty")]
    EmptyQuery,
    #[error("query embedding failed: {0}")]
    Embedding(#[source] ProviderError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// First-iteration breadth, percent of the (filtered) index.
    pub k_percent: f64,
    /// Below this many docs reranking is skipped.
    pub rerank_min_docs: usize,
    /// Sets larger than this go to the large-set scorer.
    pub rerank_routing_cutoff: usize,
    pub compression_threshold: f64,
    pub second_pass_fraction: f64,
    /// Concurrent compressor calls per query.
    pub max_in_flight: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k_percent: DEFAULT_K_PERCENT,
            rerank_min_docs: 10,
            rerank_routing_cutoff: 100,
            compression_threshold: 0.80,
            second_pass_fraction: 0.50,
            max_in_flight: crate::concurrency::DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let bad = |m: &str| Err(RetrievalError::InvalidConfig(m.to_string()));
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return bad("k_percent must be in (0, 100]");
        }
        if !(self.compression_threshold > 0.0 && self.compression_threshold <= 1.0) {
            return bad("compression_threshold must be in (0, 1]");
        }
        if !(self.second_pass_fraction > 0.0 && self.second_pass_fraction <= 1.0) {
            return bad("second_pass_fraction must be in (0, 1]");
        }
        if self.rerank_min_docs < 1 {
            return bad("rerank_min_docs must be at least 1");
        }
        if self.max_in_flight < 1 {
            return bad("max_in_flight must be at least 1");
        }
        Ok(())
    }
}

/// Per-request deltas on top of the service defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalOverrides {
    pub k_percent: Option<f64>,
    pub rerank_min_docs: Option<usize>,
    pub rerank_routing_cutoff: Option<usize>,
    pub compression_threshold: Option<f64>,
    pub second_pass_fraction: Option<f64>,
}

impl RetrievalOverrides {
    pub fn apply(&self, base: &RetrievalConfig) -> Result<RetrievalConfig, RetrievalError> {
        let cfg = RetrievalConfig {
            k_percent: self.k_percent.unwrap_or(base.k_percent),
            rerank_min_docs: self.rerank_min_docs.unwrap_or(base.rerank_min_docs),
            rerank_routing_cutoff: self
                .rerank_routing_cutoff
                .unwrap_or(base.rerank_routing_cutoff),
            compression_threshold: self
                .compression_threshold
                .unwrap_or(base.compression_threshold),
            second_pass_fraction: self
                .second_pass_fraction
                .unwrap_or(base.second_pass_fraction),
            max_in_flight: base.max_in_flight,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocStage {
    Retrieved,
    Reordered,
    Reranked,
    Compressed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDoc {
    pub comment_id: String,
    pub text: String,
    pub retrieval_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rerank_score: Option<f64>,
    /// Last stage applied to this doc.
    pub stage: DocStage,
}

impl RankedDoc {
    /// Rerank score when present, otherwise the retrieval score.
    pub fn score(&self) -> f64 {
        self.rerank_score.unwrap_or(self.retrieval_score)
    }
}

fn by_score_desc(a: &RankedDoc, b: &RankedDoc) -> std::cmp::Ordering {
    b.score()
        .total_cmp(&a.score())
        .then_with(|| a.comment_id.cmp(&b.comment_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Search,
    Reorder,
    Rerank,
    Select,
    Compress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub iteration: u8,
    pub stage: StageKind,
    pub input: usize,
    pub output: usize,
    pub elapsed_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<RerankTier>,
    #[serde(default)]
    pub early_exit: bool,
    #[serde(default)]
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl StageRecord {
    fn new(iteration: u8, stage: StageKind, input: usize, output: usize, elapsed_us: u64) -> Self {
        Self {
            iteration,
            stage,
            input,
            output,
            elapsed_us,
            scorer: None,
            early_exit: false,
            degraded: false,
            notes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrace {
    pub config: RetrievalConfig,
    pub index_size: usize,
    /// Chunks eligible after the vaccine filter.
    pub population: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vaccine_filter: Option<String>,
    pub stages: Vec<StageRecord>,
}

impl RetrievalTrace {
    pub fn stage(&self, iteration: u8, stage: StageKind) -> Option<&StageRecord> {
        self.stages
            .iter()
            .find(|s| s.iteration == iteration && s.stage == stage)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub iteration1: Vec<RankedDoc>,
    pub iteration2: Vec<RankedDoc>,
    pub trace: RetrievalTrace,
}

impl RetrievalResult {
    pub fn is_empty(&self) -> bool {
        self.iteration2.is_empty()
    }
}

/// Lost-in-the-middle ordering for a best-first list: reverse it, then
/// alternately push to the front (even positions) and back (odd positions).
/// The strongest docs end up at both edges, the weakest in the middle.
pub fn reorder_long_context<T>(docs: Vec<T>) -> Vec<T> {
    let mut out = VecDeque::with_capacity(docs.len());
    for (i, d) in docs.into_iter().rev().enumerate() {
        if i % 2 == 0 {
            out.push_front(d);
        } else {
            out.push_back(d);
        }
    }
    out.into()
}

#[derive(Debug, Clone, PartialEq)]
pub enum RerankOutcome {
    /// Fewer docs than `rerank_min_docs`; provider not called.
    EarlyExit,
    Scored(RerankTier),
    /// Provider failed; input order kept.
    Degraded { tier: RerankTier, error: String },
}

pub fn rerank_tier(n: usize, cfg: &RetrievalConfig) -> RerankTier {
    if n <= cfg.rerank_routing_cutoff {
        RerankTier::Small
    } else {
        RerankTier::Large
    }
}

/// Scores every (query, doc) pair and sorts descending (ties by comment id),
/// unless the set is below the early-exit bound.
pub fn rerank(
    query: &str,
    docs: Vec<RankedDoc>,
    reranker: &dyn Reranker,
    cfg: &RetrievalConfig,
) -> (Vec<RankedDoc>, RerankOutcome) {
    if docs.len() < cfg.rerank_min_docs {
        return (docs, RerankOutcome::EarlyExit);
    }
    let tier = rerank_tier(docs.len(), cfg);
    let passages: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let scores = reranker.score(query, &passages, tier).and_then(|s| {
        if s.len() != docs.len() {
            Err(ProviderError::InvalidResponse(format!(
                "expected {} scores, got {}",
                docs.len(),
                s.len()
            )))
        } else if s.iter().any(|x| !x.is_finite()) {
            Err(ProviderError::InvalidResponse("non-finite score".into()))
        } else {
            Ok(s)
        }
    });
    match scores {
        Ok(scores) => {
            let mut out: Vec<RankedDoc> = docs
                .into_iter()
                .zip(scores)
                .map(|(mut d, s)| {
                    d.rerank_score = Some(f64::from(s));
                    d.stage = DocStage::Reranked;
                    d
                })
                .collect();
            out.sort_by(by_score_desc);
            (out, RerankOutcome::Scored(tier))
        }
        Err(err) => {
            tracing::warn!(%err, "reranker failed, keeping retrieval order");
            (
                docs,
                RerankOutcome::Degraded {
                    tier,
                    error: err.to_string(),
                },
            )
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompressionOutcome {
    /// Docs with no sentence at or above the threshold.
    pub dropped: Vec<String>,
    /// Docs passed through uncompressed because the compressor failed.
    pub failed: Vec<String>,
    /// Kept sentences the compressor returned that are not in the doc.
    pub foreign_sentences: usize,
}

/// Reduces each doc to the sentences the compressor keeps, preserving their
/// order. Docs left with nothing are dropped.
pub fn compress_context(
    query: &str,
    docs: Vec<RankedDoc>,
    compressor: &dyn Compressor,
    threshold: f64,
    max_in_flight: usize,
) -> (Vec<RankedDoc>, CompressionOutcome) {
    let kept = bounded_map(&docs, max_in_flight, |d| {
        compressor.compress(query, &d.text, threshold)
    });
    let mut outcome = CompressionOutcome::default();
    let mut out = Vec::with_capacity(docs.len());
    for (mut doc, kept) in docs.into_iter().zip(kept) {
        match kept {
            Ok(kept) => {
                let (text, foreign) = retain_sentences(&doc.text, &kept);
                outcome.foreign_sentences += foreign;
                match text {
                    Some(t) => {
                        doc.text = t;
                        doc.stage = DocStage::Compressed;
                        out.push(doc);
                    }
                    None => outcome.dropped.push(doc.comment_id),
                }
            }
            Err(err) => {
                tracing::warn!(id = %doc.comment_id, %err, "compressor failed, passing doc through");
                outcome.failed.push(doc.comment_id.clone());
                out.push(doc);
            }
        }
    }
    (out, outcome)
}

/// Keeps the sentences of `text` that appear in `kept` (as a multiset), in
/// `text` order. Returns `None` when nothing survives, and the number of
/// `kept` entries that matched no sentence.
fn retain_sentences(text: &str, kept: &[String]) -> (Option<String>, usize) {
    let mut wanted: BTreeMap<&str, usize> = BTreeMap::new();
    for k in kept {
        *wanted.entry(k.trim()).or_default() += 1;
    }
    let sentences = split_sentences(text);
    let mut out = Vec::new();
    for s in &sentences {
        if let Some(n) = wanted.get_mut(s) {
            if *n > 0 {
                *n -= 1;
                out.push(*s);
            }
        }
    }
    let foreign = wanted.values().sum();
    if out.is_empty() {
        (None, foreign)
    } else if out.len() == sentences.len() {
        (Some(text.to_string()), foreign)
    } else {
        (Some(out.join(" ")), foreign)
    }
}

/// Top `ceil(fraction × n)` docs by score, in their original relative order.
pub fn select_top_fraction(docs: Vec<RankedDoc>, fraction: f64) -> Vec<RankedDoc> {
    if docs.is_empty() {
        return docs;
    }
    let keep = ceil_count(docs.len(), fraction).max(1);
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.sort_by(|&a, &b| by_score_desc(&docs[a], &docs[b]));
    let mut chosen = vec![false; docs.len()];
    for &i in &order[..keep] {
        chosen[i] = true;
    }
    docs.into_iter()
        .zip(chosen)
        .filter_map(|(d, c)| c.then_some(d))
        .collect()
}

fn mark(mut docs: Vec<RankedDoc>, stage: DocStage) -> Vec<RankedDoc> {
    for d in &mut docs {
        d.stage = stage;
    }
    docs
}

fn rerank_record(
    iteration: u8,
    input: usize,
    output: usize,
    elapsed_us: u64,
    outcome: &RerankOutcome,
) -> StageRecord {
    let mut rec = StageRecord::new(iteration, StageKind::Rerank, input, output, elapsed_us);
    match outcome {
        RerankOutcome::EarlyExit => rec.early_exit = true,
        RerankOutcome::Scored(tier) => rec.scorer = Some(*tier),
        RerankOutcome::Degraded { tier, error } => {
            rec.scorer = Some(*tier);
            rec.degraded = true;
            rec.notes.push(error.clone());
        }
    }
    rec
}

/// Runs both iterations for one query. An empty index (or an empty filtered
/// population) yields an empty result with a trace, not an error.
pub fn run_pipeline(
    query: &str,
    index: &VectorIndex,
    providers: &Providers,
    cfg: &RetrievalConfig,
    vaccine_filter: Option<&str>,
    clock: &Clock,
) -> Result<RetrievalResult, RetrievalError> {
    cfg.validate()?;
    if query.trim().is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    let filter = vaccine_filter.map(|v| v.trim().to_lowercase());
    let accepts = |tags: &[String]| filter.as_ref().is_none_or(|f| tags.iter().any(|t| t == f));
    let population = index.chunks().iter().filter(|c| accepts(&c.tags)).count();
    let mut trace = RetrievalTrace {
        config: *cfg,
        index_size: index.len(),
        population,
        vaccine_filter: filter.clone(),
        stages: Vec::new(),
    };

    // Iteration 1
    let sw = clock.stopwatch();
    let hits = if population == 0 {
        Vec::new()
    } else {
        let qv = providers
            .embedder
            .embed(&[query.to_string()])
            .map_err(RetrievalError::Embedding)?
            .pop()
            .ok_or_else(|| RetrievalError::Embedding(ProviderError::InvalidResponse("no vector".into())))?;
        index.search_top_percent_where(&qv, cfg.k_percent, |c| accepts(&c.tags))?
    };
    let docs: Vec<RankedDoc> = hits
        .into_iter()
        .map(|h| {
            let chunk = index.get(&h.comment_id).expect("hit refers to indexed chunk");
            RankedDoc {
                comment_id: h.comment_id,
                text: chunk.text.clone(),
                retrieval_score: h.score,
                rerank_score: None,
                stage: DocStage::Retrieved,
            }
        })
        .collect();
    let mut rec = StageRecord::new(1, StageKind::Search, population, docs.len(), sw.elapsed_us());
    if population == 0 {
        rec.notes.push("empty population".into());
    }
    trace.stages.push(rec);

    let sw = clock.stopwatch();
    let n = docs.len();
    let docs = mark(reorder_long_context(docs), DocStage::Reordered);
    trace
        .stages
        .push(StageRecord::new(1, StageKind::Reorder, n, n, sw.elapsed_us()));

    let sw = clock.stopwatch();
    let (iteration1, outcome) = rerank(query, docs, providers.reranker.as_ref(), cfg);
    trace
        .stages
        .push(rerank_record(1, n, iteration1.len(), sw.elapsed_us(), &outcome));

    // Iteration 2
    let sw = clock.stopwatch();
    let selected = select_top_fraction(iteration1.clone(), cfg.second_pass_fraction);
    trace.stages.push(StageRecord::new(
        2,
        StageKind::Select,
        iteration1.len(),
        selected.len(),
        sw.elapsed_us(),
    ));

    let sw = clock.stopwatch();
    let n = selected.len();
    let (mut compressed, outcome) = compress_context(
        query,
        selected,
        providers.compressor.as_ref(),
        cfg.compression_threshold,
        cfg.max_in_flight,
    );
    let mut rec = StageRecord::new(2, StageKind::Compress, n, compressed.len(), sw.elapsed_us());
    if !outcome.failed.is_empty() {
        rec.degraded = true;
        rec.notes
            .push(format!("passed through uncompressed: {}", outcome.failed.join(",")));
    }
    if !outcome.dropped.is_empty() {
        rec.notes.push(format!("dropped: {}", outcome.dropped.join(",")));
    }
    if outcome.foreign_sentences > 0 {
        rec.notes.push(format!(
            "ignored {} sentences not present in source",
            outcome.foreign_sentences
        ));
    }
    trace.stages.push(rec);

    let sw = clock.stopwatch();
    compressed.sort_by(by_score_desc);
    let n = compressed.len();
    let docs = mark(reorder_long_context(compressed), DocStage::Reordered);
    trace
        .stages
        .push(StageRecord::new(2, StageKind::Reorder, n, n, sw.elapsed_us()));

    let sw = clock.stopwatch();
    let (iteration2, outcome) = rerank(query, docs, providers.reranker.as_ref(), cfg);
    trace
        .stages
        .push(rerank_record(2, n, iteration2.len(), sw.elapsed_us(), &outcome));

    Ok(RetrievalResult {
        query: query.to_string(),
        iteration1,
        iteration2,
        trace,
    })
}
