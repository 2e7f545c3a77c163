//! Synthetic test-case generation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::LazyLock;

use rand::{Rng, RngCore, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Difficulty;
use crate::answer::OutputMode;
use crate::concurrency::{bounded_map, DEFAULT_MAX_IN_FLIGHT};
use crate::corpus::Comment;
use crate::prompt::Template;
use crate::providers::{ChatProvider, ChatRequest, ChatTask, Passage, ProviderError, RetryPolicy};
use crate::text::content_tokens;

const MIX_TOLERANCE: f64 = 1e-9;

static TESTGEN_TEMPLATES: LazyLock<BTreeMap<OutputMode, Template>> = LazyLock::new(|| {
    let parse = |name, src| Template::parse(name, src).expect("shipped testgen template parses");
    BTreeMap::from([
        (
            OutputMode::AnswerQuestion,
            parse(
                "testgen/answer_question.v1",
                include_str!("../../templates/testgen/answer_question.v1.txt"),
            ),
        ),
        (
            OutputMode::TopicsOfDiscussion,
            parse(
                "testgen/topics_of_discussion.v1",
                include_str!("../../templates/testgen/topics_of_discussion.v1.txt"),
            ),
        ),
        (
            OutputMode::Summarise,
            parse(
                "testgen/summarise.v1",
                include_str!("../../templates/testgen/summarise.v1.txt"),
            ),
        ),
        (
            OutputMode::PublicConcerns,
            parse(
                "testgen/public_concerns.v1",
                include_str!("../../templates/testgen/public_concerns.v1.txt"),
            ),
        ),
    ])
});

#[derive(Debug, Error)]
pub enum TestGenError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("multi-context cases need at least two comments")]
    NotEnoughForMultiContext,
    #[error("invalid mix: {0}")]
    InvalidMix(String),
    #[error("cannot open {path}: {source}")]
    Open {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("test case line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    pub question: String,
    pub ground_truth: String,
    pub ground_truth_contexts: Vec<String>,
    #[serde(default)]
    pub source_ids: Vec<String>,
    pub mode: OutputMode,
    pub difficulty: Difficulty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyMix {
    pub simple: f64,
    pub reasoning: f64,
    pub multi_context: f64,
}

impl Default for DifficultyMix {
    fn default() -> Self {
        Self {
            simple: 0.50,
            reasoning: 0.25,
            multi_context: 0.25,
        }
    }
}

impl DifficultyMix {
    fn weights(&self) -> [f64; 3] {
        [self.simple, self.reasoning, self.multi_context]
    }

    pub fn validate(&self) -> Result<(), TestGenError> {
        validate_weights(&self.weights())
    }

    pub fn counts(&self, n: usize) -> BTreeMap<Difficulty, usize> {
        Difficulty::ALL
            .into_iter()
            .zip(largest_remainder(n, &self.weights()))
            .collect()
    }
}

/// Share of cases per output mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModeMix(pub BTreeMap<OutputMode, f64>);

impl Default for ModeMix {
    fn default() -> Self {
        Self(OutputMode::ALL.into_iter().map(|m| (m, 0.25)).collect())
    }
}

impl ModeMix {
    /// Weights proportional to the given counts.
    pub fn from_counts(counts: &[(OutputMode, usize)]) -> Self {
        let total: usize = counts.iter().map(|(_, c)| c).sum();
        Self(
            counts
                .iter()
                .map(|&(m, c)| (m, c as f64 / total.max(1) as f64))
                .collect(),
        )
    }

    /// 103 question answering, 56 public concerns, 45 summarise and 72 topics
    /// cases out of 276.
    pub fn reference_split() -> Self {
        Self::from_counts(&[
            (OutputMode::AnswerQuestion, 103),
            (OutputMode::PublicConcerns, 56),
            (OutputMode::Summarise, 45),
            (OutputMode::TopicsOfDiscussion, 72),
        ])
    }

    fn weights(&self) -> [f64; 4] {
        OutputMode::ALL.map(|m| self.0.get(&m).copied().unwrap_or(0.0))
    }

    pub fn validate(&self) -> Result<(), TestGenError> {
        validate_weights(&self.weights())
    }

    pub fn counts(&self, n: usize) -> BTreeMap<OutputMode, usize> {
        OutputMode::ALL
            .into_iter()
            .zip(largest_remainder(n, &self.weights()))
            .collect()
    }
}

fn validate_weights(w: &[f64]) -> Result<(), TestGenError> {
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(TestGenError::InvalidMix("weights must be finite and non-negative".into()));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > MIX_TOLERANCE {
        return Err(TestGenError::InvalidMix(format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Splits `n` by `weights` (summing to 1): floor every quota, then hand the
/// leftover units to the largest fractional parts, ties to the lower index.
/// Quotas within 1e-9 of an integer count as that integer.
pub fn largest_remainder(n: usize, weights: &[f64]) -> Vec<usize> {
    let mut counts = Vec::with_capacity(weights.len());
    let mut fracs = Vec::with_capacity(weights.len());
    for (i, w) in weights.iter().enumerate() {
        let quota = w * n as f64;
        let nearest = quota.round();
        let (whole, frac) = if (quota - nearest).abs() < MIX_TOLERANCE {
            (nearest, 0.0)
        } else {
            (quota.floor(), quota - quota.floor())
        };
        counts.push(whole.max(0.0) as usize);
        fracs.push((i, frac));
    }
    let assigned: usize = counts.iter().sum();
    let leftover = n.saturating_sub(assigned);
    fracs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for &(i, _) in fracs.iter().take(leftover) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestGenOptions {
    pub n_total: usize,
    pub difficulty_mix: DifficultyMix,
    pub mode_mix: ModeMix,
    pub seed: u64,
    /// Source draws per case before it is skipped.
    pub max_attempts_per_case: usize,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
}

impl TestGenOptions {
    pub fn new(n_total: usize) -> Self {
        Self {
            n_total,
            difficulty_mix: DifficultyMix::default(),
            mode_mix: ModeMix::default(),
            seed: 0,
            max_attempts_per_case: 3,
            retry: RetryPolicy::default(),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCase {
    pub slot: usize,
    pub mode: OutputMode,
    pub difficulty: Difficulty,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub cases: Vec<TestCase>,
    pub skipped: Vec<SkippedCase>,
}

#[derive(Deserialize)]
struct GeneratedPair {
    question: String,
    ground_truth: String,
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

fn parse_pair(text: &str) -> Result<GeneratedPair, ProviderError> {
    let start = text.find('{');
    let end = text.rfind('}');
    let body = match (start, end) {
        (Some(s), Some(e)) if s < e => &text[s..=e],
        _ => return Err(ProviderError::InvalidResponse("no JSON object in reply".into())),
    };
    let pair: GeneratedPair = serde_json::from_str(body)
        .map_err(|e| ProviderError::InvalidResponse(format!("test case JSON: {e}")))?;
    if pair.question.trim().is_empty() || pair.ground_truth.trim().is_empty() {
        return Err(ProviderError::InvalidResponse("empty question or ground truth".into()));
    }
    Ok(pair)
}

/// Generates `n_total` cases whose difficulty and mode counts follow the
/// mixes exactly. Deterministic for a deterministic generator and fixed seed.
pub fn generate_testcases(
    corpus: &[Comment],
    opts: &TestGenOptions,
    generator: &dyn ChatProvider,
) -> Result<GenerationOutput, TestGenError> {
    opts.difficulty_mix.validate()?;
    opts.mode_mix.validate()?;
    if corpus.is_empty() {
        return Err(TestGenError::EmptyCorpus);
    }
    let difficulty_counts = opts.difficulty_mix.counts(opts.n_total);
    if difficulty_counts[&Difficulty::MultiContext] > 0 && corpus.len() < 2 {
        return Err(TestGenError::NotEnoughForMultiContext);
    }

    let mut sources: Vec<&Comment> = corpus.iter().collect();
    sources.sort_by(|a, b| a.id.cmp(&b.id));
    let token_sets: Vec<BTreeSet<String>> = sources
        .iter()
        .map(|c| content_tokens(&c.text).into_iter().collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut difficulties: Vec<Difficulty> = difficulty_counts
        .iter()
        .flat_map(|(&d, &c)| std::iter::repeat_n(d, c))
        .collect();
    difficulties.shuffle(&mut rng);
    let modes: Vec<OutputMode> = opts
        .mode_mix
        .counts(opts.n_total)
        .iter()
        .flat_map(|(&m, &c)| std::iter::repeat_n(m, c))
        .collect();
    let slots: Vec<(usize, OutputMode, Difficulty, u64)> = modes
        .into_iter()
        .zip(difficulties)
        .enumerate()
        .map(|(i, (m, d))| (i, m, d, rng.next_u64()))
        .collect();

    let partner = |src: usize| -> usize {
        let mut best = None;
        for (j, set) in token_sets.iter().enumerate() {
            if j == src {
                continue;
            }
            let score = jaccard(&token_sets[src], set);
            // Ties resolve to the lower index, i.e. the smaller id.
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((j, score));
            }
        }
        best.expect("corpus has at least two comments").0
    };

    let results = bounded_map(&slots, opts.max_in_flight, |&(slot, mode, difficulty, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut last_err = String::new();
        for _ in 0..opts.max_attempts_per_case.max(1) {
            let src = rng.random_range(0..sources.len());
            let mut picked = vec![src];
            if difficulty == Difficulty::MultiContext {
                picked.push(partner(src));
            }
            let passages: Vec<Passage> = picked
                .iter()
                .map(|&i| Passage {
                    id: sources[i].id.clone(),
                    text: sources[i].text.clone(),
                })
                .collect();
            let context = passages
                .iter()
                .enumerate()
                .map(|(i, p)| format!("{}. {}", i + 1, p.text))
                .collect::<Vec<_>>()
                .join("\n");
            let prompt = TESTGEN_TEMPLATES[&mode]
                .render(&[("difficulty", difficulty.instruction()), ("context", &context)]);
            let request = ChatRequest {
                system: prompt.system,
                user: prompt.user,
                task: ChatTask::GenerateTestCase {
                    mode,
                    difficulty,
                    passages: passages.clone(),
                },
            };
            match opts
                .retry
                .run(|| generator.complete(&request))
                .and_then(|t| parse_pair(&t))
            {
                Ok(pair) => {
                    return Ok(TestCase {
                        id: format!("tc-{slot:04}"),
                        question: pair.question.trim().to_string(),
                        ground_truth: pair.ground_truth.trim().to_string(),
                        ground_truth_contexts: passages.iter().map(|p| p.text.clone()).collect(),
                        source_ids: passages.into_iter().map(|p| p.id).collect(),
                        mode,
                        difficulty,
                    })
                }
                Err(e) => {
                    tracing::debug!(slot, %e, "test case generation attempt failed");
                    last_err = e.to_string();
                }
            }
        }
        Err(SkippedCase {
            slot,
            mode,
            difficulty,
            reason: last_err,
        })
    });

    let mut out = GenerationOutput {
        cases: Vec::new(),
        skipped: Vec::new(),
    };
    for r in results {
        match r {
            Ok(c) => out.cases.push(c),
            Err(s) => {
                tracing::warn!(slot = s.slot, reason = %s.reason, "test case skipped");
                out.skipped.push(s);
            }
        }
    }
    Ok(out)
}

pub fn write_testcases(path: &Path, cases: &[TestCase]) -> Result<(), TestGenError> {
    let file = File::create(path).map_err(|source| TestGenError::Open {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    for c in cases {
        let line = serde_json::to_string(c).map_err(|e| TestGenError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_testcases(path: &Path) -> Result<Vec<TestCase>, TestGenError> {
    let file = File::open(path).map_err(|source| TestGenError::Open {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let case: TestCase = serde_json::from_str(&line).map_err(|e| TestGenError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if case.ground_truth.trim().is_empty() {
            return Err(TestGenError::Parse {
                line: i + 1,
                message: "ground_truth is empty".into(),
            });
        }
        out.push(case);
    }
    Ok(out)
}
