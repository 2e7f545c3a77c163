//! Post loading, cleaning and two-step vaccine segregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::LazyLock;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concurrency::{bounded_map, DEFAULT_MAX_IN_FLIGHT};
use crate::providers::{BucketClassifier, ProviderError, RetryPolicy, VaccineExtractor};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot open {path}: {source}")]
    Open {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("empty comment text")]
    EmptyText,
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Platform {
    X,
    Reddit,
    Youtube,
    Facebook,
    #[default]
    Other,
}

impl Platform {
    pub fn parse_lenient(s: &str) -> Self {
        match s.trim().to_ascii_lowercase().as_str() {
            "x" | "twitter" => Platform::X,
            "reddit" => Platform::Reddit,
            "youtube" => Platform::Youtube,
            "facebook" => Platform::Facebook,
            _ => Platform::Other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Vaccine,
    PersonalHealth,
    Other,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Vaccine, Bucket::PersonalHealth, Bucket::Other];

    /// Buckets eligible for vaccine-specific extraction.
    pub fn is_candidate(self) -> bool {
        matches!(self, Bucket::Vaccine | Bucket::PersonalHealth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPost {
    pub id: String,
    pub platform: Platform,
    pub created_at: DateTime<Utc>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub author_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comment {
    pub id: String,
    pub text: String,
    pub platform: Platform,
    pub created_at: DateTime<Utc>,
    pub bucket: Bucket,
    #[serde(default)]
    pub vaccine_tags: BTreeSet<String>,
    /// Processing anomalies, e.g. a classifier that failed after all retries.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadWarning {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadedPosts {
    pub posts: Vec<RawPost>,
    pub warnings: Vec<LoadWarning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub vaccine: String,
    pub total_loaded: usize,
    pub skipped_lines: usize,
    pub total_after_preprocess: usize,
    pub per_bucket_counts: BTreeMap<Bucket, usize>,
    pub vaccine_specific_count: usize,
    pub classification_flagged: usize,
    pub extraction_flagged: usize,
}

/// Reads a JSONL export. Malformed lines are skipped and reported; only a
/// missing or unreadable file is fatal.
pub fn load_posts(path: &Path) -> Result<LoadedPosts, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Open {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = LoadedPosts::default();
    let mut seen = BTreeSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_post(&line) {
            Ok(post) => {
                if seen.insert(post.id.clone()) {
                    out.posts.push(post);
                } else {
                    out.warnings.push(LoadWarning {
                        line: line_no,
                        reason: format!("duplicate id {:?}", post.id),
                    });
                }
            }
            Err(reason) => {
                tracing::warn!(line = line_no, %reason, "skipping malformed post");
                out.warnings.push(LoadWarning { line: line_no, reason });
            }
        }
    }
    Ok(out)
}

fn parse_post(line: &str) -> Result<RawPost, String> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = value.as_object().ok_or("not a JSON object")?;
    let id = match obj.get("id") {
        Some(serde_json::Value::String(s)) if !s.is_empty() => s.clone(),
        Some(serde_json::Value::Number(n)) => n.to_string(),
        _ => return Err("missing `id`".into()),
    };
    let text = obj
        .get("text")
        .and_then(|t| t.as_str())
        .ok_or("missing `text`")?
        .to_string();
    let created_at = obj
        .get("created_at")
        .and_then(|t| t.as_str())
        .ok_or("missing `created_at`")?;
    let created_at = DateTime::parse_from_rfc3339(created_at)
        .map_err(|e| format!("bad `created_at`: {e}"))?
        .with_timezone(&Utc);
    let platform = obj
        .get("platform")
        .and_then(|p| p.as_str())
        .map(Platform::parse_lenient)
        .unwrap_or_default();
    let author_hash = obj
        .get("author_hash")
        .and_then(|a| a.as_str())
        .map(str::to_string);
    Ok(RawPost {
        id,
        platform,
        created_at,
        text,
        author_hash,
    })
}

static URL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(?:https?://|www\.)\S+").expect("url regex"));
static MENTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(^|[^\w@])@\w+").expect("mention regex"));
static WHITESPACE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s+").expect("ws regex"));

/// Cleans one comment: decodes HTML entities, drops URLs and @-mentions,
/// collapses whitespace. Emoji and other text are left alone.
///
/// The rule set is applied until the text stops changing, so the result is a
/// fixpoint and the function is idempotent. Decoding and removals strictly
/// shorten the text and whitespace normalisation is stable after one pass, so
/// the loop terminates.
pub fn preprocess(text: &str) -> String {
    let mut current = text.to_string();
    loop {
        let next = preprocess_once(&current);
        if next == current {
            return next;
        }
        current = next;
    }
}

fn preprocess_once(text: &str) -> String {
    let decoded = html_escape::decode_html_entities(text);
    let no_urls = URL.replace_all(&decoded, " ");
    let no_mentions = MENTION.replace_all(&no_urls, "$1 ");
    WHITESPACE.replace_all(&no_mentions, " ").trim().to_string()
}

/// Single classifier call. Empty text is rejected before reaching the provider.
pub fn classify_bucket(
    comment_text: &str,
    classifier: &dyn BucketClassifier,
) -> Result<Bucket, CorpusError> {
    if comment_text.trim().is_empty() {
        return Err(CorpusError::EmptyText);
    }
    Ok(classifier.classify(comment_text)?)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Segregation {
    pub comments: Vec<Comment>,
    /// Ids excluded because the extractor failed on them.
    pub flagged: Vec<String>,
}

/// Keeps candidate-bucket comments that concern `vaccine_name`, tagging each.
/// Output is a subsequence of the input.
pub fn segregate_vaccine_specific(
    comments: &[Comment],
    vaccine_name: &str,
    extractor: &dyn VaccineExtractor,
    retry: &RetryPolicy,
    max_in_flight: usize,
) -> Segregation {
    let vaccine = vaccine_name.trim().to_lowercase();
    let verdicts = bounded_map(comments, max_in_flight, |c| {
        if !c.bucket.is_candidate() {
            return Ok(false);
        }
        retry.run(|| extractor.concerns(&c.text, &vaccine))
    });
    let mut out = Segregation::default();
    for (comment, verdict) in comments.iter().zip(verdicts) {
        match verdict {
            Ok(true) => {
                let mut c = comment.clone();
                c.vaccine_tags.insert(vaccine.clone());
                out.comments.push(c);
            }
            Ok(false) => {}
            Err(err) => {
                tracing::warn!(id = %comment.id, %err, "extractor failed, excluding comment");
                out.flagged.push(comment.id.clone());
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub vaccine: String,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
}

impl IngestOptions {
    pub fn new(vaccine: impl Into<String>) -> Self {
        Self {
            vaccine: vaccine.into(),
            retry: RetryPolicy::default(),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IngestOutput {
    /// Every comment that survived preprocessing, classified, in input order.
    /// Vaccine-specific ones carry a non-empty `vaccine_tags`.
    pub comments: Vec<Comment>,
    pub report: IngestReport,
}

impl IngestOutput {
    pub fn vaccine_specific(&self) -> impl Iterator<Item = &Comment> {
        self.comments.iter().filter(|c| !c.vaccine_tags.is_empty())
    }
}

/// Preprocess → classify → segregate over a loaded batch.
pub fn ingest(
    loaded: &LoadedPosts,
    classifier: &dyn BucketClassifier,
    extractor: &dyn VaccineExtractor,
    opts: &IngestOptions,
) -> IngestOutput {
    let cleaned: Vec<(&RawPost, String)> = loaded
        .posts
        .iter()
        .map(|p| (p, preprocess(&p.text)))
        .filter(|(_, t)| !t.is_empty())
        .collect();

    let buckets = bounded_map(&cleaned, opts.max_in_flight, |(_, text)| {
        opts.retry.run(|| classifier.classify(text))
    });

    let mut comments = Vec::with_capacity(cleaned.len());
    let mut classification_flagged = 0;
    for ((post, text), bucket) in cleaned.into_iter().zip(buckets) {
        let (bucket, flags) = match bucket {
            Ok(b) => (b, Vec::new()),
            Err(err) => {
                tracing::warn!(id = %post.id, %err, "classifier failed, marking as other");
                classification_flagged += 1;
                (Bucket::Other, vec![format!("classification_failed: {err}")])
            }
        };
        comments.push(Comment {
            id: post.id.clone(),
            text,
            platform: post.platform,
            created_at: post.created_at,
            bucket,
            vaccine_tags: BTreeSet::new(),
            flags,
        });
    }

    let seg = segregate_vaccine_specific(
        &comments,
        &opts.vaccine,
        extractor,
        &opts.retry,
        opts.max_in_flight,
    );
    let tagged: BTreeMap<&str, &Comment> =
        seg.comments.iter().map(|c| (c.id.as_str(), c)).collect();
    let flagged: BTreeSet<&str> = seg.flagged.iter().map(String::as_str).collect();
    for c in comments.iter_mut() {
        if let Some(t) = tagged.get(c.id.as_str()) {
            c.vaccine_tags = t.vaccine_tags.clone();
        } else if flagged.contains(c.id.as_str()) {
            c.flags.push("extraction_failed".to_string());
        }
    }

    let mut per_bucket_counts: BTreeMap<Bucket, usize> =
        Bucket::ALL.iter().map(|b| (*b, 0)).collect();
    for c in &comments {
        *per_bucket_counts.entry(c.bucket).or_default() += 1;
    }
    let report = IngestReport {
        vaccine: opts.vaccine.trim().to_lowercase(),
        total_loaded: loaded.posts.len(),
        skipped_lines: loaded.warnings.len(),
        total_after_preprocess: comments.len(),
        per_bucket_counts,
        vaccine_specific_count: seg.comments.len(),
        classification_flagged,
        extraction_flagged: seg.flagged.len(),
    };
    IngestOutput { comments, report }
}

pub fn write_corpus(path: &Path, comments: &[Comment]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for c in comments {
        serde_json::to_writer(&mut w, c).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Comment>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Open {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let c: Comment = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::stub::{AliasVaccineExtractor, KeywordBucketClassifier};
    use proptest::prelude::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    const GOOD: &str = r#"{"id":"1","platform":"x","created_at":"2023-01-02T03:04:05Z","text":"hello"}"#;

    #[test]
    fn loads_well_formed_lines() {
        let f = write_lines(&[
            GOOD,
            r#"{"id":"2","platform":"reddit","created_at":"2023-01-02T03:04:05Z","text":"b"}"#,
            r#"{"id":"3","platform":"youtube","created_at":"2023-01-02T03:04:05+10:00","text":"c","author_hash":"ab"}"#,
        ]);
        let loaded = load_posts(f.path()).unwrap();
        assert_eq!(loaded.posts.len(), 3);
        assert!(loaded.warnings.is_empty());
        assert_eq!(loaded.posts[2].platform, Platform::Youtube);
        assert_eq!(loaded.posts[2].author_hash.as_deref(), Some("ab"));
    }

    #[test]
    fn missing_id_is_a_warning_not_an_error() {
        let f = write_lines(&[
            GOOD,
            r#"{"platform":"x","created_at":"2023-01-02T03:04:05Z","text":"no id"}"#,
            r#"{"id":"2","platform":"x","created_at":"2023-01-02T03:04:05Z","text":"b"}"#,
        ]);
        let loaded = load_posts(f.path()).unwrap();
        assert_eq!(loaded.posts.len(), 2);
        assert_eq!(loaded.warnings.len(), 1);
        assert_eq!(loaded.warnings[0].line, 2);
    }

    #[test]
    fn empty_file_and_missing_file() {
        let f = write_lines(&[]);
        let loaded = load_posts(f.path()).unwrap();
        assert!(loaded.posts.is_empty() && loaded.warnings.is_empty());
        assert!(matches!(
            load_posts(Path::new("/definitely/not/here.jsonl")),
            Err(CorpusError::Open { .. })
        ));
    }

    #[test]
    fn duplicate_ids_and_garbage_are_skipped() {
        let f = write_lines(&[GOOD, GOOD, "not json", r#"{"id":"9","created_at":"x","text":"t"}"#]);
        let loaded = load_posts(f.path()).unwrap();
        assert_eq!(loaded.posts.len(), 1);
        assert_eq!(loaded.warnings.len(), 3);
    }

    #[test]
    fn preprocess_examples() {
        assert_eq!(preprocess("Got my shot!"), "Got my shot!");
        assert_eq!(preprocess("see https://t.co/abc @user   great"), "see great");
        assert_eq!(preprocess("https://x.com/a"), "");
        assert_eq!(preprocess("Fish &amp; chips &lt;3 💉"), "Fish & chips <3 💉");
        assert_eq!(preprocess("mail me@example.com now"), "mail me@example.com now");
        assert_eq!(preprocess("&amp;#64;bob hi"), "hi");
        assert_eq!(preprocess("@a@b x"), "x");
    }

    proptest! {
        #[test]
        fn preprocess_is_idempotent(s in "(\\PC|@|&|;|#|/|:| |\\.|amp|http|www|lt)*") {
            let once = preprocess(&s);
            prop_assert_eq!(preprocess(&once), once);
        }
    }

    #[test]
    fn stub_classifier_examples() {
        let c = KeywordBucketClassifier::shipped();
        assert_eq!(
            classify_bucket("New shingles vaccine clinic opens Monday", &c).unwrap(),
            Bucket::Vaccine
        );
        assert_eq!(
            classify_bucket("Shingrix gave me a sore arm for two days", &c).unwrap(),
            Bucket::PersonalHealth
        );
        assert_eq!(
            classify_bucket("Great football match last night", &c).unwrap(),
            Bucket::Other
        );
        assert!(matches!(classify_bucket("  ", &c), Err(CorpusError::EmptyText)));
    }

    fn comment(id: &str, text: &str, bucket: Bucket) -> Comment {
        Comment {
            id: id.into(),
            text: text.into(),
            platform: Platform::Other,
            created_at: DateTime::<Utc>::UNIX_EPOCH,
            bucket,
            vaccine_tags: BTreeSet::new(),
            flags: vec![],
        }
    }

    #[test]
    fn segregation_examples() {
        let ex = AliasVaccineExtractor::shipped();
        let input = vec![
            comment("a", "Shingrix dose two hurt", Bucket::PersonalHealth),
            comment("b", "Zostavax was fine", Bucket::Vaccine),
        ];
        let out = segregate_vaccine_specific(&input, "shingrix", &ex, &RetryPolicy::none(), 4);
        assert_eq!(out.comments.len(), 1);
        assert_eq!(out.comments[0].id, "a");
        assert_eq!(out.comments[0].vaccine_tags, BTreeSet::from(["shingrix".to_string()]));

        let empty = segregate_vaccine_specific(&[], "shingrix", &ex, &RetryPolicy::none(), 4);
        assert!(empty.comments.is_empty());

        let twice = vec![comment("c", "shingrix shingrix", Bucket::Vaccine)];
        let out = segregate_vaccine_specific(&twice, "shingrix", &ex, &RetryPolicy::none(), 4);
        assert_eq!(out.comments.len(), 1);
        assert_eq!(out.comments[0].vaccine_tags.len(), 1);
    }

    #[test]
    fn other_bucket_is_never_a_candidate() {
        let ex = AliasVaccineExtractor::shipped();
        let input = vec![comment("a", "shingrix is a word", Bucket::Other)];
        let out = segregate_vaccine_specific(&input, "shingrix", &ex, &RetryPolicy::none(), 1);
        assert!(out.comments.is_empty());
    }

    struct Failing;
    impl BucketClassifier for Failing {
        fn classify(&self, _: &str) -> Result<Bucket, ProviderError> {
            Err(ProviderError::Unavailable("down".into()))
        }
    }
    impl VaccineExtractor for Failing {
        fn concerns(&self, _: &str, _: &str) -> Result<bool, ProviderError> {
            Err(ProviderError::Unavailable("down".into()))
        }
    }

    #[test]
    fn provider_failures_flag_instead_of_aborting() {
        let loaded = LoadedPosts {
            posts: vec![RawPost {
                id: "1".into(),
                platform: Platform::X,
                created_at: DateTime::<Utc>::UNIX_EPOCH,
                text: "my shingrix dose hurt".into(),
                author_hash: None,
            }],
            warnings: vec![],
        };
        let mut opts = IngestOptions::new("shingrix");
        opts.retry = RetryPolicy::immediate(2);
        let out = ingest(&loaded, &Failing, &AliasVaccineExtractor::shipped(), &opts);
        assert_eq!(out.comments[0].bucket, Bucket::Other);
        assert_eq!(out.report.classification_flagged, 1);
        assert!(!out.comments[0].flags.is_empty());

        let out = ingest(&loaded, &KeywordBucketClassifier::shipped(), &Failing, &opts);
        assert_eq!(out.report.vaccine_specific_count, 0);
        assert_eq!(out.report.extraction_flagged, 1);
        assert_eq!(out.comments[0].flags, vec!["extraction_failed".to_string()]);
    }

    #[test]
    fn ingest_report_is_consistent() {
        let texts = [
            "Shingrix gave me a sore arm for two days",
            "New shingles vaccine clinic opens Monday",
            "https://spam.example",
            "Great football match last night",
            "Zostavax was fine back then",
        ];
        let loaded = LoadedPosts {
            posts: texts
                .iter()
                .enumerate()
                .map(|(i, t)| RawPost {
                    id: format!("p{i}"),
                    platform: Platform::Reddit,
                    created_at: DateTime::<Utc>::UNIX_EPOCH,
                    text: t.to_string(),
                    author_hash: None,
                })
                .collect(),
            warnings: vec![],
        };
        let out = ingest(
            &loaded,
            &KeywordBucketClassifier::shipped(),
            &AliasVaccineExtractor::shipped(),
            &IngestOptions::new("Shingrix"),
        );
        let r = &out.report;
        assert_eq!(r.total_loaded, 5);
        assert_eq!(r.total_after_preprocess, 4);
        assert_eq!(r.per_bucket_counts.values().sum::<usize>(), r.total_after_preprocess);
        assert_eq!(r.vaccine_specific_count, 1);
        assert!(r.vaccine_specific_count <= r.total_after_preprocess);
        assert_eq!(out.vaccine_specific().next().unwrap().id, "p0");
    }

    #[test]
    fn corpus_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let mut c = comment("a", "text", Bucket::Vaccine);
        c.vaccine_tags.insert("shingrix".into());
        write_corpus(&path, &[c.clone()]).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), vec![c]);
    }
}
