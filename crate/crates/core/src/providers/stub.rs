//! Deterministic offline providers.
//!
//! These back every test and the `stub` provider mode of the service. None of
//! them touch the network, and each is a pure function of its inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::Deserialize;

use super::{
    BucketClassifier, ChatProvider, ChatRequest, ChatTask, Compressor, Embedder, Passage,
    ProviderError, RerankTier, Reranker, VaccineExtractor,
};
use crate::answer::OutputMode;
use crate::corpus::Bucket;
use crate::eval::Difficulty;
use crate::index::cosine;
use crate::text::{citation_tag, content_tokens, fnv1a, split_sentences, strip_citations, tokens};

const SHIPPED_BUCKET_RULES: &str = include_str!("../../data/bucket_rules.toml");
const SHIPPED_VACCINE_ALIASES: &str = include_str!("../../data/vaccine_aliases.toml");

#[derive(Debug, Clone, Deserialize)]
struct PersonalHealthRules {
    first_person: BTreeSet<String>,
    health_terms: BTreeSet<String>,
}

#[derive(Debug, Clone, Deserialize)]
struct VaccineRules {
    terms: BTreeSet<String>,
}

#[derive(Debug, Clone, Deserialize)]
struct RuleTable {
    #[allow(dead_code)]
    version: u32,
    personal_health: PersonalHealthRules,
    vaccine: VaccineRules,
}

/// Keyword rule-table classifier (see `data/bucket_rules.toml`).
#[derive(Debug, Clone)]
pub struct KeywordBucketClassifier {
    rules: RuleTable,
}

impl KeywordBucketClassifier {
    pub fn shipped() -> Self {
        Self::from_toml(SHIPPED_BUCKET_RULES).expect("shipped bucket rules parse")
    }

    pub fn from_toml(src: &str) -> Result<Self, toml::de::Error> {
        Ok(Self {
            rules: toml::from_str(src)?,
        })
    }
}

impl BucketClassifier for KeywordBucketClassifier {
    fn classify(&self, text: &str) -> Result<Bucket, ProviderError> {
        let toks: BTreeSet<String> = tokens(text).into_iter().collect();
        let any = |set: &BTreeSet<String>| set.iter().any(|t| toks.contains(t));
        let ph = &self.rules.personal_health;
        Ok(if any(&ph.first_person) && any(&ph.health_terms) {
            Bucket::PersonalHealth
        } else if any(&self.rules.vaccine.terms) {
            Bucket::Vaccine
        } else {
            Bucket::Other
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
struct AliasTable {
    #[allow(dead_code)]
    version: u32,
    aliases: BTreeMap<String, Vec<String>>,
}

/// Case-insensitive whole-token match of a vaccine name or any of its aliases.
#[derive(Debug, Clone)]
pub struct AliasVaccineExtractor {
    aliases: BTreeMap<String, Vec<Vec<String>>>,
}

impl AliasVaccineExtractor {
    pub fn shipped() -> Self {
        Self::from_toml(SHIPPED_VACCINE_ALIASES).expect("shipped alias table parses")
    }

    pub fn from_toml(src: &str) -> Result<Self, toml::de::Error> {
        let table: AliasTable = toml::from_str(src)?;
        let aliases = table
            .aliases
            .into_iter()
            .map(|(k, v)| (k.to_lowercase(), v.iter().map(|a| tokens(a)).collect()))
            .collect();
        Ok(Self { aliases })
    }
}

impl VaccineExtractor for AliasVaccineExtractor {
    fn concerns(&self, text: &str, vaccine: &str) -> Result<bool, ProviderError> {
        let toks = tokens(text);
        let own = vec![tokens(vaccine)];
        let phrases = self.aliases.get(&vaccine.to_lowercase()).unwrap_or(&own);
        Ok(phrases
            .iter()
            .filter(|p| !p.is_empty())
            .any(|p| toks.windows(p.len()).any(|w| w == p.as_slice())))
    }
}

/// Feature-hashing bag-of-words embedder.
///
/// Each content token adds 1.0 at `fnv1a(token) % dim`; the result is
/// L2-normalised. Weights are non-negative, so any text with at least one
/// token yields a non-zero vector.
#[derive(Debug, Clone)]
pub struct HashedEmbedder {
    dim: usize,
}

impl HashedEmbedder {
    pub const MODEL_ID: &'static str = "hashed-bow-v1";

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn embed_one(&self, text: &str) -> Result<Vec<f32>, ProviderError> {
        let toks = content_tokens(text);
        if toks.is_empty() {
            return Err(ProviderError::Rejected("text has no tokens".into()));
        }
        let mut acc = vec![0f64; self.dim];
        for t in &toks {
            acc[(fnv1a(t.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(acc.into_iter().map(|x| (x / norm) as f32).collect())
    }
}

impl Embedder for HashedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn model_id(&self) -> &str {
        Self::MODEL_ID
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

/// Scores a passage by how many distinct query content tokens it contains.
/// Both tiers use the same scorer; calls are counted per tier.
#[derive(Debug, Default)]
pub struct LexicalReranker {
    small_calls: AtomicUsize,
    large_calls: AtomicUsize,
}

impl LexicalReranker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self, tier: RerankTier) -> usize {
        match tier {
            RerankTier::Small => self.small_calls.load(Ordering::SeqCst),
            RerankTier::Large => self.large_calls.load(Ordering::SeqCst),
        }
    }

    pub fn total_calls(&self) -> usize {
        self.calls(RerankTier::Small) + self.calls(RerankTier::Large)
    }

    pub fn overlap(query: &str, passage: &str) -> usize {
        let q: BTreeSet<String> = content_tokens(query).into_iter().collect();
        let p: BTreeSet<String> = tokens(passage).into_iter().collect();
        q.intersection(&p).count()
    }
}

impl Reranker for LexicalReranker {
    fn score(
        &self,
        query: &str,
        passages: &[&str],
        tier: RerankTier,
    ) -> Result<Vec<f32>, ProviderError> {
        match tier {
            RerankTier::Small => self.small_calls.fetch_add(1, Ordering::SeqCst),
            RerankTier::Large => self.large_calls.fetch_add(1, Ordering::SeqCst),
        };
        Ok(passages
            .iter()
            .map(|p| Self::overlap(query, p) as f32)
            .collect())
    }
}

/// Reference compressor: keeps sentences whose embedding similarity to the
/// query reaches the threshold.
///
/// Dense sentence embeddings put unrelated text at a cosine of roughly 0.7,
/// so thresholds tuned for them sit high. A bag-of-words embedding puts it
/// near 0. `with_floor` maps cosine `c` to `floor + (1 - floor) * max(c, 0)`
/// so the same threshold keeps a comparable share of sentences.
#[derive(Clone)]
pub struct EmbeddingCompressor {
    embedder: Arc<dyn Embedder>,
    floor: f64,
}

impl EmbeddingCompressor {
    /// Dense-embedding baseline used with [`HashedEmbedder`].
    pub const HASHED_FLOOR: f64 = 0.7;

    /// Raw cosine, no calibration.
    pub fn new(embedder: Arc<dyn Embedder>) -> Self {
        Self { embedder, floor: 0.0 }
    }

    pub fn with_floor(embedder: Arc<dyn Embedder>, floor: f64) -> Self {
        assert!((0.0..1.0).contains(&floor), "floor must lie in [0, 1)");
        Self { embedder, floor }
    }

    pub fn similarity(&self, cosine: f64) -> f64 {
        self.floor + (1.0 - self.floor) * cosine.max(0.0)
    }
}

impl Compressor for EmbeddingCompressor {
    fn compress(
        &self,
        query: &str,
        passage: &str,
        threshold: f64,
    ) -> Result<Vec<String>, ProviderError> {
        let sentences = split_sentences(passage);
        if sentences.is_empty() {
            return Ok(Vec::new());
        }
        let mut inputs = Vec::with_capacity(sentences.len() + 1);
        inputs.push(query.to_string());
        inputs.extend(sentences.iter().map(|s| s.to_string()));
        let vectors = self.embedder.embed(&inputs)?;
        if vectors.len() != inputs.len() {
            return Err(ProviderError::InvalidResponse(format!(
                "expected {} vectors, got {}",
                inputs.len(),
                vectors.len()
            )));
        }
        let (q, rest) = vectors.split_first().expect("non-empty");
        let mut kept = Vec::new();
        for (sentence, v) in sentences.iter().zip(rest) {
            let c = cosine(q, v).map_err(|e| ProviderError::InvalidResponse(e.to_string()))?;
            if self.similarity(c) >= threshold {
                kept.push(sentence.to_string());
            }
        }
        Ok(kept)
    }
}

/// Offline chat model.
///
/// * Answers by copying context sentences verbatim, each followed by its
///   `[comment:id]` citation, picked by a per-mode heuristic.
/// * Generates test cases by wrapping a source sentence in a mode/difficulty
///   question frame, with the source sentences as ground truth.
/// * Regenerates questions from an answer by framing its claims.
#[derive(Debug, Clone, Default)]
pub struct ExtractiveChat;

impl ExtractiveChat {
    pub const MODEL_ID: &'static str = "extractive-stub-v1";
    const MAX_ITEMS: usize = 5;
    const CONCERN_CUES: &'static [&'static str] = &[
        "afraid", "anxious", "chills", "concern", "concerned", "concerns", "cost", "costs",
        "expensive", "fatigue", "fever", "hesitant", "hurt", "pain", "painful", "price",
        "reaction", "risk", "scared", "shortage", "side", "sore", "unsure", "worried", "worry",
    ];

    fn answer(mode: OutputMode, query: &str, passages: &[Passage]) -> String {
        let query_tokens: BTreeSet<String> = content_tokens(query).into_iter().collect();
        let overlap = |s: &str| {
            content_tokens(s)
                .into_iter()
                .collect::<BTreeSet<_>>()
                .intersection(&query_tokens)
                .count()
        };
        // (passage index, sentence index, sentence, id)
        let mut all = Vec::new();
        for (pi, p) in passages.iter().enumerate() {
            for (si, s) in split_sentences(&p.text).into_iter().enumerate() {
                all.push((pi, si, s, p.id.as_str()));
            }
        }
        let by_overlap = |items: &mut Vec<(usize, usize, &str, &str)>| {
            items.sort_by(|a, b| {
                overlap(b.2)
                    .cmp(&overlap(a.2))
                    .then(a.0.cmp(&b.0))
                    .then(a.1.cmp(&b.1))
            });
        };
        let best_per_passage = || {
            let mut out = Vec::new();
            for pi in 0..passages.len() {
                let mut mine: Vec<_> = all.iter().copied().filter(|x| x.0 == pi).collect();
                by_overlap(&mut mine);
                out.extend(mine.into_iter().take(1));
            }
            out
        };

        let picked: Vec<(usize, usize, &str, &str)> = match mode {
            OutputMode::AnswerQuestion => {
                let mut v = all.clone();
                by_overlap(&mut v);
                v.truncate(3);
                v
            }
            OutputMode::Summarise => all.iter().copied().filter(|x| x.1 == 0).collect(),
            OutputMode::TopicsOfDiscussion => best_per_passage(),
            OutputMode::PublicConcerns => {
                let cued: Vec<_> = all
                    .iter()
                    .copied()
                    .filter(|x| {
                        tokens(x.2)
                            .iter()
                            .any(|t| Self::CONCERN_CUES.binary_search(&t.as_str()).is_ok())
                    })
                    .collect();
                if cued.is_empty() {
                    let mut v = all.clone();
                    by_overlap(&mut v);
                    v.truncate(3);
                    v
                } else {
                    cued
                }
            }
        };
        let items = picked
            .into_iter()
            .take(Self::MAX_ITEMS)
            .map(|(_, _, s, id)| format!("{s} {}", citation_tag(id)));
        match mode {
            OutputMode::AnswerQuestion | OutputMode::Summarise => {
                items.collect::<Vec<_>>().join(" ")
            }
            OutputMode::TopicsOfDiscussion | OutputMode::PublicConcerns => items
                .map(|i| format!("- {i}"))
                .collect::<Vec<_>>()
                .join("\n"),
        }
    }

    fn pick_sentence(text: &str) -> &str {
        let sentences = split_sentences(text);
        let mut best = sentences.first().copied().unwrap_or(text);
        let mut best_len = 0;
        for s in sentences {
            let n = content_tokens(s).len();
            if n > best_len {
                best = s;
                best_len = n;
            }
        }
        best
    }

    fn generate_case(
        mode: OutputMode,
        difficulty: Difficulty,
        passages: &[Passage],
    ) -> Result<String, ProviderError> {
        if passages.is_empty() {
            return Err(ProviderError::Rejected("no source passages".into()));
        }
        let picked: Vec<&str> = passages.iter().map(|p| Self::pick_sentence(&p.text)).collect();
        let bare: Vec<&str> = picked
            .iter()
            .map(|s| s.trim_end_matches(['.', '!', '?']))
            .collect();
        let topic = match difficulty {
            Difficulty::Simple | Difficulty::Reasoning => bare[0].to_string(),
            Difficulty::MultiContext => bare.join(" and "),
        };
        let frame = match mode {
            OutputMode::AnswerQuestion => "What about",
            OutputMode::TopicsOfDiscussion => "What topics about",
            OutputMode::Summarise => "Summarise",
            OutputMode::PublicConcerns => "What concerns about",
        };
        let question = match difficulty {
            Difficulty::Reasoning => format!("{frame} {topic}, and why?"),
            _ => format!("{frame} {topic}?"),
        };
        let ground_truth = picked.join(" ");
        Ok(serde_json::json!({ "question": question, "ground_truth": ground_truth }).to_string())
    }

    fn regenerate_questions(answer: &str, count: usize) -> String {
        let claims: Vec<String> = strip_citations(answer)
            .iter()
            .flat_map(|seg| split_sentences(seg).into_iter().map(str::to_string).collect::<Vec<_>>())
            .collect();
        if claims.is_empty() {
            return String::new();
        }
        (0..count)
            .map(|i| {
                let c = claims[i % claims.len()].trim_end_matches(['.', '!', '?']);
                format!("What about {c}?")
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

impl ChatProvider for ExtractiveChat {
    fn model_id(&self) -> &str {
        Self::MODEL_ID
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        match &request.task {
            ChatTask::Answer {
                mode,
                query,
                passages,
            } => Ok(Self::answer(*mode, query, passages)),
            ChatTask::GenerateTestCase {
                mode,
                difficulty,
                passages,
            } => Self::generate_case(*mode, *difficulty, passages),
            ChatTask::RegenerateQuestions { answer, count } => {
                Ok(Self::regenerate_questions(answer, *count))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cue_list_sorted() {
        let mut v = ExtractiveChat::CONCERN_CUES.to_vec();
        v.sort_unstable();
        assert_eq!(v, ExtractiveChat::CONCERN_CUES);
    }

    #[test]
    fn hashed_embedder_is_deterministic_and_unit_norm() {
        let e = HashedEmbedder::new(1536);
        let a = e.embed_one("Second dose of Shingrix knocked me out").unwrap();
        let b = e.embed_one("Second dose of Shingrix knocked me out").unwrap();
        assert_eq!(a, b);
        let norm = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(a.len(), 1536);
    }

    #[test]
    fn hashed_embedder_depends_only_on_token_multiset() {
        let e = HashedEmbedder::new(64);
        assert_eq!(
            e.embed_one("sore arm fever").unwrap(),
            e.embed_one("fever, sore ARM").unwrap()
        );
        assert_ne!(
            e.embed_one("sore arm fever").unwrap(),
            e.embed_one("sore sore arm fever").unwrap()
        );
    }

    #[test]
    fn hashed_embedder_small_dim_distinguishes_tokens() {
        // Hash collision audit for the documented dim=8 example.
        let e = HashedEmbedder::new(8);
        assert_ne!(fnv1a(b"a") % 8, fnv1a(b"b") % 8);
        let v = e.embed(&["a".to_string(), "b".to_string()]).unwrap();
        assert_eq!(v.len(), 2);
        assert!(v.iter().all(|x| x.len() == 8));
        assert_ne!(v[0], v[1]);
    }

    #[test]
    fn hashed_embedder_rejects_tokenless_text() {
        assert!(HashedEmbedder::new(8).embed_one(" !! ").is_err());
    }

    #[test]
    fn lexical_reranker_counts_distinct_overlap() {
        let r = LexicalReranker::new();
        let scores = r
            .score(
                "second dose shingrix",
                &["second dose was rough", "loved the game", "shingrix is out"],
                RerankTier::Small,
            )
            .unwrap();
        assert_eq!(scores, vec![2.0, 0.0, 1.0]);
        assert_eq!(r.calls(RerankTier::Small), 1);
        assert_eq!(r.calls(RerankTier::Large), 0);
    }

    #[test]
    fn alias_extractor_matches_phrases() {
        let x = AliasVaccineExtractor::shipped();
        assert!(x.concerns("Got the RZV today", "shingrix").unwrap());
        assert!(x.concerns("the recombinant zoster vaccine", "Shingrix").unwrap());
        assert!(!x.concerns("zoster vaccine is new", "shingrix").unwrap());
        assert!(x.concerns("fluad works", "fluad").unwrap());
    }

    #[test]
    fn embedding_compressor_keeps_identical_sentence() {
        let c = EmbeddingCompressor::new(Arc::new(HashedEmbedder::new(256)));
        let kept = c
            .compress(
                "second dose shingrix fever",
                "Second dose of Shingrix gave fever. The football was great.",
                0.8,
            )
            .unwrap();
        assert_eq!(kept, vec!["Second dose of Shingrix gave fever.".to_string()]);
    }

    #[test]
    fn floor_admits_partial_overlap() {
        let e: Arc<dyn Embedder> = Arc::new(HashedEmbedder::new(1024));
        let q = "What side effects do people report after the second dose?";
        let p = "Second dose knocked me out with fever. The football was great.";
        assert!(EmbeddingCompressor::new(e.clone()).compress(q, p, 0.8).unwrap().is_empty());
        let kept = EmbeddingCompressor::with_floor(e, EmbeddingCompressor::HASHED_FLOOR)
            .compress(q, p, 0.8)
            .unwrap();
        assert_eq!(kept, vec!["Second dose knocked me out with fever.".to_string()]);
    }

    #[test]
    fn extractive_answers_cite_and_copy() {
        let passages = vec![
            Passage { id: "a".into(), text: "Sore arm after dose two. Fine now.".into() },
            Passage { id: "b".into(), text: "Worried about the cost".into() },
        ];
        for mode in OutputMode::ALL {
            let text = ExtractiveChat::answer(mode, "dose two cost", &passages);
            assert!(text.contains("[comment:"), "{mode:?}: {text}");
            for seg in strip_citations(&text) {
                assert!(
                    passages.iter().any(|p| p.text.contains(&seg)),
                    "{mode:?}: {seg:?} not copied"
                );
            }
        }
    }

    #[test]
    fn regenerated_questions_cycle_claims() {
        let q = ExtractiveChat::regenerate_questions("Sore arm. [comment:a]", 3);
        assert_eq!(q.lines().count(), 3);
        assert!(q.lines().all(|l| l == "What about Sore arm?"));
        assert_eq!(ExtractiveChat::regenerate_questions("", 3), "");
    }
}
