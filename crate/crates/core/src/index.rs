//! Embeddings and the exhaustive cosine index.
//!
//! Search is an exact scan: every chunk is scored, then the top
//! `ceil(N * k_percent / 100)` are selected with a total order (score
//! descending, comment id ascending). Vectors are stored as `f32`; all
//! arithmetic is done in `f64`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Comment;
use crate::providers::remote::{EndpointConfig, RemoteEmbedder};
use crate::providers::stub::HashedEmbedder;
use crate::providers::{Embedder, ProviderError};
use crate::text::fnv1a;

pub const DEFAULT_DIM: usize = 1536;
pub const DEFAULT_K_PERCENT: f64 = 5.0;

const MAGIC: &[u8; 8] = b"VXRGIDX\0";
const FORMAT_VERSION: u32 = 1;
const PAR_SCAN_MIN: usize = 4096;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("vector lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("non-finite value in vector")]
    NonFinite,
    #[error("index is empty")]
    Empty,
    #[error("k_percent must be in (0, 100], got {0}")]
    KPercentOutOfRange(f64),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("cannot embed empty text at position {0}")]
    EmptyText(usize),
    #[error("corrupt index file at byte offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error("unsupported index format version {0}")]
    UnsupportedVersion(u32),
    #[error("embedding provider: {0}")]
    Provider(#[from] ProviderError),
    #[error("embedding config: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingProviderKind {
    Remote,
    #[default]
    HashedStub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    #[serde(default)]
    pub provider: EmbeddingProviderKind,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub endpoint: Option<EndpointConfig>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_dim() -> usize {
    DEFAULT_DIM
}

fn default_batch() -> usize {
    64
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            provider: EmbeddingProviderKind::HashedStub,
            dim: DEFAULT_DIM,
            endpoint: None,
            batch_size: default_batch(),
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<(), IndexError> {
        if self.dim == 0 {
            return Err(IndexError::Config("dim must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(IndexError::Config("batch_size must be positive".into()));
        }
        if self.provider == EmbeddingProviderKind::Remote && self.endpoint.is_none() {
            return Err(IndexError::Config("remote embedder needs an endpoint".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Arc<dyn Embedder>, IndexError> {
        self.validate()?;
        Ok(match self.provider {
            EmbeddingProviderKind::HashedStub => Arc::new(HashedEmbedder::new(self.dim)),
            EmbeddingProviderKind::Remote => Arc::new(RemoteEmbedder::new(
                self.endpoint.clone().expect("validated"),
                self.dim,
            )?),
        })
    }
}

/// Embeds `texts` in batches of `batch_size`, checking every vector's length.
pub fn embed_batch(
    texts: &[String],
    embedder: &dyn Embedder,
    batch_size: usize,
) -> Result<Vec<Vec<f32>>, IndexError> {
    if let Some(pos) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(IndexError::EmptyText(pos));
    }
    let mut out = Vec::with_capacity(texts.len());
    for batch in texts.chunks(batch_size.max(1)) {
        let vectors = embedder.embed(batch)?;
        if vectors.len() != batch.len() {
            return Err(IndexError::Provider(ProviderError::InvalidResponse(format!(
                "expected {} vectors, got {}",
                batch.len(),
                vectors.len()
            ))));
        }
        for v in &vectors {
            if v.len() != embedder.dim() {
                return Err(IndexError::DimMismatch {
                    expected: embedder.dim(),
                    actual: v.len(),
                });
            }
        }
        out.extend(vectors);
    }
    Ok(out)
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt()
}

fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()
}

/// Cosine similarity clamped to [-1, 1]. Zero-norm inputs are an error.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64, IndexError> {
    if u.len() != v.len() {
        return Err(IndexError::LengthMismatch(u.len(), v.len()));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(IndexError::ZeroNorm);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `ceil(n * fraction)`, treating values within 1e-9 of an integer as that
/// integer so that e.g. 100 × 0.07 yields 7 and not 8.
pub fn ceil_count(n: usize, fraction: f64) -> usize {
    let exact = n as f64 * fraction;
    let nearest = exact.round();
    let count = if (exact - nearest).abs() < 1e-9 {
        nearest
    } else {
        exact.ceil()
    };
    (count.max(0.0) as usize).min(n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedChunk {
    pub comment_id: String,
    pub vector: Vec<f32>,
    pub norm: f64,
    pub text: String,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub comment_id: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    chunks: Vec<IndexedChunk>,
    slots: HashMap<String, usize>,
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            chunks: Vec::new(),
            slots: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn get(&self, comment_id: &str) -> Option<&IndexedChunk> {
        self.slots.get(comment_id).map(|&i| &self.chunks[i])
    }

    pub fn chunks(&self) -> &[IndexedChunk] {
        &self.chunks
    }

    /// Inserts or replaces by `comment_id`.
    pub fn upsert(
        &mut self,
        comment_id: impl Into<String>,
        text: impl Into<String>,
        tags: Vec<String>,
        vector: Vec<f32>,
    ) -> Result<(), IndexError> {
        if vector.len() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(IndexError::NonFinite);
        }
        let n = norm(&vector);
        if n == 0.0 {
            return Err(IndexError::ZeroNorm);
        }
        let chunk = IndexedChunk {
            comment_id: comment_id.into(),
            vector,
            norm: n,
            text: text.into(),
            tags,
        };
        match self.slots.get(&chunk.comment_id) {
            Some(&slot) => self.chunks[slot] = chunk,
            None => {
                self.slots.insert(chunk.comment_id.clone(), self.chunks.len());
                self.chunks.push(chunk);
            }
        }
        Ok(())
    }

    /// Embeds and upserts comments. Returns how many were written.
    pub fn upsert_comments<'a>(
        &mut self,
        comments: impl IntoIterator<Item = &'a Comment>,
        embedder: &dyn Embedder,
        batch_size: usize,
    ) -> Result<usize, IndexError> {
        if embedder.dim() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                actual: embedder.dim(),
            });
        }
        let comments: Vec<&Comment> = comments.into_iter().collect();
        let texts: Vec<String> = comments.iter().map(|c| c.text.clone()).collect();
        let vectors = embed_batch(&texts, embedder, batch_size)?;
        for (c, v) in comments.iter().zip(vectors) {
            self.upsert(
                c.id.clone(),
                c.text.clone(),
                c.vaccine_tags.iter().cloned().collect(),
                v,
            )?;
        }
        Ok(comments.len())
    }

    pub fn search_top_percent(
        &self,
        query_vec: &[f32],
        k_percent: f64,
    ) -> Result<Vec<SearchHit>, IndexError> {
        self.search_top_percent_where(query_vec, k_percent, |_| true)
    }

    /// Top-k% over the chunks accepted by `filter`; N is the filtered size.
    pub fn search_top_percent_where(
        &self,
        query_vec: &[f32],
        k_percent: f64,
        filter: impl Fn(&IndexedChunk) -> bool + Sync,
    ) -> Result<Vec<SearchHit>, IndexError> {
        if !(k_percent > 0.0 && k_percent <= 100.0) {
            return Err(IndexError::KPercentOutOfRange(k_percent));
        }
        if query_vec.len() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                actual: query_vec.len(),
            });
        }
        let qn = norm(query_vec);
        if qn == 0.0 {
            return Err(IndexError::ZeroNorm);
        }
        let score = |(i, c): (usize, &IndexedChunk)| -> Option<(f64, usize)> {
            filter(c).then(|| {
                let s = (dot(query_vec, &c.vector) / (qn * c.norm)).clamp(-1.0, 1.0);
                (s, i)
            })
        };
        let mut scored: Vec<(f64, usize)> = if self.chunks.len() >= PAR_SCAN_MIN {
            self.chunks.par_iter().enumerate().filter_map(score).collect()
        } else {
            self.chunks.iter().enumerate().filter_map(score).collect()
        };
        if scored.is_empty() {
            return Err(IndexError::Empty);
        }
        let k = ceil_count(scored.len(), k_percent / 100.0).max(1);
        let id = |i: usize| self.chunks[i].comment_id.as_str();
        let order = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.total_cmp(&a.0).then_with(|| id(a.1).cmp(id(b.1)))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(i, (score, slot))| SearchHit {
                comment_id: id(slot).to_string(),
                score,
                rank: i + 1,
            })
            .collect())
    }

    /// Writes the versioned binary format:
    /// magic, version u32, dim u32, count u64, then per chunk
    /// `id`, `text` (u32 length-prefixed UTF-8) and tags (u16 count, each u16
    /// length-prefixed), then `count × dim` little-endian f32, then an FNV-1a
    /// checksum (u64) of everything before it.
    pub fn persist(&self, path: &Path) -> Result<(), IndexError> {
        let mut buf = Vec::with_capacity(64 + self.chunks.len() * (self.dim * 4 + 64));
        buf.extend_from_slice(MAGIC);
        buf.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        buf.write_u32::<LittleEndian>(self.dim as u32)?;
        buf.write_u64::<LittleEndian>(self.chunks.len() as u64)?;
        for c in &self.chunks {
            write_str32(&mut buf, &c.comment_id)?;
            write_str32(&mut buf, &c.text)?;
            buf.write_u16::<LittleEndian>(c.tags.len() as u16)?;
            for t in &c.tags {
                buf.write_u16::<LittleEndian>(t.len() as u16)?;
                buf.extend_from_slice(t.as_bytes());
            }
        }
        for c in &self.chunks {
            for x in &c.vector {
                buf.write_f32::<LittleEndian>(*x)?;
            }
        }
        let checksum = fnv1a(&buf);
        buf.write_u64::<LittleEndian>(checksum)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a file written by [`persist`](Self::persist). When `expected_dim`
    /// is given, a file of any other dimension is rejected.
    pub fn restore(path: &Path, expected_dim: Option<usize>) -> Result<Self, IndexError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, expected_dim)
    }

    pub fn from_bytes(bytes: &[u8], expected_dim: Option<usize>) -> Result<Self, IndexError> {
        let mut r = Reader::new(bytes);
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(IndexError::Corrupt {
                offset: 0,
                reason: "bad magic bytes".into(),
            });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(IndexError::UnsupportedVersion(version));
        }
        let dim = r.u32("dim")? as usize;
        if dim == 0 {
            return Err(r.corrupt("zero dimension"));
        }
        if let Some(expected) = expected_dim {
            if expected != dim {
                return Err(IndexError::DimMismatch {
                    expected,
                    actual: dim,
                });
            }
        }
        let count = r.u64("count")? as usize;
        let min_body = count.saturating_mul(dim * 4 + 10);
        if min_body > bytes.len() {
            return Err(r.corrupt("chunk count exceeds file size"));
        }
        let mut meta = Vec::with_capacity(count);
        for _ in 0..count {
            let id = r.str32("comment id")?;
            let text = r.str32("text")?;
            let n_tags = r.u16("tag count")?;
            let mut tags = Vec::with_capacity(n_tags as usize);
            for _ in 0..n_tags {
                let len = r.u16("tag length")? as usize;
                tags.push(r.utf8(len, "tag")?);
            }
            meta.push((id, text, tags));
        }
        let mut index = VectorIndex::new(dim);
        for (id, text, tags) in meta {
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                v.push(r.f32("vector")?);
            }
            let offset = r.offset();
            if index.slots.contains_key(&id) {
                return Err(IndexError::Corrupt {
                    offset,
                    reason: format!("duplicate comment id {id:?}"),
                });
            }
            index.upsert(id, text, tags, v).map_err(|e| IndexError::Corrupt {
                offset,
                reason: e.to_string(),
            })?;
        }
        let body_len = r.offset() as usize;
        let stored = r.u64("checksum")?;
        if stored != fnv1a(&bytes[..body_len]) {
            return Err(IndexError::Corrupt {
                offset: body_len as u64,
                reason: "checksum mismatch".into(),
            });
        }
        if r.offset() as usize != bytes.len() {
            return Err(r.corrupt("trailing bytes"));
        }
        Ok(index)
    }
}

fn write_str32(buf: &mut Vec<u8>, s: &str) -> std::io::Result<()> {
    buf.write_u32::<LittleEndian>(s.len() as u32)?;
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self {
            cur: Cursor::new(bytes),
        }
    }

    fn offset(&self) -> u64 {
        self.cur.position()
    }

    fn corrupt(&self, reason: impl Into<String>) -> IndexError {
        IndexError::Corrupt {
            offset: self.offset(),
            reason: reason.into(),
        }
    }

    fn truncated(&self, what: &str) -> IndexError {
        self.corrupt(format!("truncated while reading {what}"))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], IndexError> {
        let start = self.offset() as usize;
        let bytes = *self.cur.get_ref();
        if start + n > bytes.len() {
            return Err(self.truncated(what));
        }
        self.cur.set_position((start + n) as u64);
        Ok(&bytes[start..start + n])
    }

    fn u16(&mut self, what: &str) -> Result<u16, IndexError> {
        self.cur
            .read_u16::<LittleEndian>()
            .map_err(|_| self.truncated(what))
    }

    fn u32(&mut self, what: &str) -> Result<u32, IndexError> {
        self.cur
            .read_u32::<LittleEndian>()
            .map_err(|_| self.truncated(what))
    }

    fn u64(&mut self, what: &str) -> Result<u64, IndexError> {
        self.cur
            .read_u64::<LittleEndian>()
            .map_err(|_| self.truncated(what))
    }

    fn f32(&mut self, what: &str) -> Result<f32, IndexError> {
        self.cur
            .read_f32::<LittleEndian>()
            .map_err(|_| self.truncated(what))
    }

    fn utf8(&mut self, len: usize, what: &str) -> Result<String, IndexError> {
        let at = self.offset();
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| IndexError::Corrupt {
            offset: at,
            reason: format!("{what} is not valid UTF-8"),
        })
    }

    fn str32(&mut self, what: &str) -> Result<String, IndexError> {
        let len = self.u32(what)? as usize;
        self.utf8(len, what)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.70710678).abs() < 1e-8);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(IndexError::ZeroNorm)));
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(IndexError::LengthMismatch(1, 2))));
    }

    #[test]
    fn ceil_count_examples() {
        assert_eq!(ceil_count(40, 0.05), 2);
        assert_eq!(ceil_count(100, 0.07), 7);
        assert_eq!(ceil_count(5, 0.5), 3);
        assert_eq!(ceil_count(8, 0.5), 4);
        assert_eq!(ceil_count(1, 0.01), 1);
        assert_eq!(ceil_count(3, 1.0), 3);
    }

    fn index_of(n: usize) -> VectorIndex {
        let e = HashedEmbedder::new(16);
        let mut idx = VectorIndex::new(16);
        for i in 0..n {
            let text = format!("word{} word{} shared", i % 7, i % 3);
            idx.upsert(format!("c{i:03}"), text.clone(), vec![], e.embed_one(&text).unwrap())
                .unwrap();
        }
        idx
    }

    #[test]
    fn hit_counts() {
        let idx = index_of(40);
        let q = HashedEmbedder::new(16).embed_one("word1 shared").unwrap();
        assert_eq!(idx.search_top_percent(&q, 5.0).unwrap().len(), 2);
        let single = index_of(1);
        let hits = single.search_top_percent(&q, 0.001).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].rank, 1);
    }

    #[test]
    fn ties_break_by_id_and_ranks_are_consecutive() {
        let idx = index_of(40);
        let q = HashedEmbedder::new(16).embed_one("word1 shared").unwrap();
        let hits = idx.search_top_percent(&q, 100.0).unwrap();
        for (i, w) in hits.windows(2).enumerate() {
            assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].comment_id < w[1].comment_id));
            assert_eq!(w[0].rank, i + 1);
        }
    }

    #[test]
    fn search_errors() {
        let q = vec![1.0f32; 16];
        assert!(matches!(VectorIndex::new(16).search_top_percent(&q, 5.0), Err(IndexError::Empty)));
        let idx = index_of(3);
        assert!(matches!(idx.search_top_percent(&q, 0.0), Err(IndexError::KPercentOutOfRange(_))));
        assert!(matches!(idx.search_top_percent(&q, 100.5), Err(IndexError::KPercentOutOfRange(_))));
        assert!(matches!(idx.search_top_percent(&q, f64::NAN), Err(IndexError::KPercentOutOfRange(_))));
        assert!(matches!(idx.search_top_percent(&[1.0], 5.0), Err(IndexError::DimMismatch { .. })));
    }

    #[test]
    fn upsert_replaces() {
        let mut idx = VectorIndex::new(2);
        idx.upsert("a", "one", vec![], vec![1.0, 0.0]).unwrap();
        idx.upsert("a", "two", vec![], vec![0.0, 2.0]).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.get("a").unwrap().text, "two");
        assert_eq!(idx.get("a").unwrap().norm, 2.0);
        assert!(matches!(idx.upsert("b", "z", vec![], vec![0.0, 0.0]), Err(IndexError::ZeroNorm)));
    }

    #[test]
    fn filter_restricts_population() {
        let mut idx = VectorIndex::new(2);
        idx.upsert("a", "x", vec!["shingrix".into()], vec![1.0, 0.0]).unwrap();
        idx.upsert("b", "y", vec![], vec![1.0, 0.1]).unwrap();
        let hits = idx
            .search_top_percent_where(&[1.0, 0.0], 100.0, |c| c.tags.iter().any(|t| t == "shingrix"))
            .unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].comment_id, "a");
    }

    #[test]
    fn persist_restore_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        let mut idx = index_of(25);
        idx.upsert("tagged", "t", vec!["shingrix".into(), "x".into()], vec![0.5; 16]).unwrap();
        idx.persist(&path).unwrap();
        let back = VectorIndex::restore(&path, Some(16)).unwrap();
        assert_eq!(back, idx);

        assert!(matches!(
            VectorIndex::restore(&path, Some(8)),
            Err(IndexError::DimMismatch { expected: 8, actual: 16 })
        ));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            VectorIndex::from_bytes(&bytes, None),
            Err(IndexError::Corrupt { offset: 0, .. })
        ));

        let bytes = std::fs::read(&path).unwrap();
        let truncated = &bytes[..bytes.len() - 20];
        match VectorIndex::from_bytes(truncated, None) {
            Err(IndexError::Corrupt { offset, .. }) => assert!(offset > 24),
            other => panic!("expected corrupt, got {other:?}"),
        }

        let mut flipped = bytes.clone();
        let mid = bytes.len() - 30;
        flipped[mid] ^= 0x01;
        assert!(matches!(VectorIndex::from_bytes(&flipped, None), Err(IndexError::Corrupt { .. })));
    }

    #[test]
    fn embed_batch_validates() {
        let e = HashedEmbedder::new(8);
        let texts: Vec<String> = (0..10).map(|i| format!("text {i}")).collect();
        let v = embed_batch(&texts, &e, 3).unwrap();
        assert_eq!(v.len(), 10);
        assert!(matches!(
            embed_batch(&["ok".into(), " ".into()], &e, 3),
            Err(IndexError::EmptyText(1))
        ));
    }
}
