//! Embedding index construction and top-k cosine querying.
//!
//! Index file layout (little-endian):
//!
//! ```text
//! magic    b"KCMI"
//! u32      format version
//! u32      dimension D
//! u64      entry count
//! u32 len + utf8   checkpoint sha256
//! f64      l_kcm
//! [f32]    count * D vector components
//! [u8]     JSON trailer: per-entry metadata
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::preprocessing::{CropRect, GrayscaleImage, INPUT_SIZE};
use crate::shot_miner::{FrameRef, FrameSource};

pub const INDEX_MAGIC: &[u8; 4] = b"KCMI";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub source_id: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>, source_id: impl Into<String>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("embedding has no components".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding has non-finite entries".into()));
        }
        Ok(Self { values, source_id: source_id.into() })
    }

    pub fn from_f64(values: &[f64], source_id: impl Into<String>) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f32).collect(), source_id)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

/// Cosine similarity in f64, clamped to [-1, 1]. Zero vectors are rejected.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of vectors of length {} and {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Identifies exactly how embeddings were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub checkpoint_sha256: String,
    pub l_kcm: f64,
    pub dim: usize,
}

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "sha256={} l_kcm={} D={}", self.checkpoint_sha256, self.l_kcm, self.dim)
    }
}

pub trait Embedder {
    fn embed(&self, img: &GrayscaleImage) -> Result<EmbeddingVector>;

    fn embed_batch(&self, images: &[&GrayscaleImage]) -> Result<Vec<EmbeddingVector>> {
        images.iter().map(|img| self.embed(img)).collect()
    }

    fn fingerprint(&self) -> Fingerprint;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub source_id: String,
    pub film_id: String,
    pub shot_id: String,
    pub frame_index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropRect>,
}

impl EntryMeta {
    pub fn from_frame(f: &FrameRef) -> Self {
        Self {
            source_id: f.source_id(),
            film_id: f.film_id.clone(),
            shot_id: f.shot_id.clone(),
            frame_index: f.frame_index,
            path: Some(f.path.clone()),
            crop: f.crop,
        }
    }

    /// The frame this entry was embedded from, when its path is known.
    pub fn frame(&self) -> Option<FrameRef> {
        Some(FrameRef {
            film_id: self.film_id.clone(),
            shot_id: self.shot_id.clone(),
            frame_index: self.frame_index,
            path: self.path.clone()?,
            crop: self.crop,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub meta: EntryMeta,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchHit {
    pub rank: usize,
    pub source_id: String,
    pub similarity: f64,
}

/// Ranked nearest-neighbor search over stored vectors.
pub trait SearchBackend {
    fn search(&self, entries: &[IndexEntry], query: &[f32], k: usize) -> Result<Vec<SearchHit>>;
}

/// Exact scan over every entry.
#[derive(Debug, Clone, Copy, Default)]
pub struct BruteForce;

impl SearchBackend for BruteForce {
    fn search(&self, entries: &[IndexEntry], query: &[f32], k: usize) -> Result<Vec<SearchHit>> {
        let mut scored = entries
            .iter()
            .map(|e| Ok((cosine_similarity(&e.vector, query)?, e.meta.source_id.as_str())))
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        Ok(scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, (s, id))| SearchHit { rank: i + 1, source_id: id.to_string(), similarity: s })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    entries: Vec<IndexEntry>,
    fingerprint: Fingerprint,
}

#[derive(Debug)]
pub struct BuildReport {
    pub index: RetrievalIndex,
    pub failures: Vec<(String, String)>,
}

impl RetrievalIndex {
    pub fn new(entries: Vec<IndexEntry>, fingerprint: Fingerprint) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Data("index has no entries".into()));
        }
        let mut seen = HashSet::new();
        let dups: Vec<String> = entries
            .iter()
            .filter(|e| !seen.insert(e.meta.source_id.clone()))
            .map(|e| e.meta.source_id.clone())
            .collect();
        if !dups.is_empty() {
            return Err(Error::Duplicate(dups));
        }
        if let Some(e) = entries.iter().find(|e| e.vector.len() != fingerprint.dim) {
            return Err(Error::Shape(format!(
                "entry {} has dimension {}, fingerprint says {}",
                e.meta.source_id,
                e.vector.len(),
                fingerprint.dim
            )));
        }
        Ok(Self { entries, fingerprint })
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    pub fn dim(&self) -> usize {
        self.fingerprint.dim
    }

    pub fn check_fingerprint(&self, embedder: &Fingerprint) -> Result<()> {
        if &self.fingerprint != embedder {
            return Err(Error::FingerprintMismatch {
                index: self.fingerprint.to_string(),
                embedder: embedder.to_string(),
            });
        }
        Ok(())
    }

    /// Top-k by cosine similarity against a precomputed query vector.
    pub fn query_vector(&self, query: &[f32], k: usize) -> Result<Vec<SearchHit>> {
        self.query_with(&BruteForce, query, k)
    }

    pub fn query_with(&self, backend: &dyn SearchBackend, query: &[f32], k: usize) -> Result<Vec<SearchHit>> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if query.len() != self.dim() {
            return Err(Error::Shape(format!("query has dimension {}, index has {}", query.len(), self.dim())));
        }
        backend.search(&self.entries, query, k)
    }

    pub fn query(&self, embedder: &dyn Embedder, img: &GrayscaleImage, k: usize) -> Result<Vec<SearchHit>> {
        self.check_fingerprint(&embedder.fingerprint())?;
        let v = embedder.embed(img)?;
        self.query_vector(&v.values, k)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let fp = &self.fingerprint;
        let n = self.entries.len();
        let mut out = Vec::with_capacity(64 + n * fp.dim * 4);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(fp.dim as u32).to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(fp.checkpoint_sha256.len() as u32).to_le_bytes());
        out.extend_from_slice(fp.checkpoint_sha256.as_bytes());
        out.extend_from_slice(&fp.l_kcm.to_le_bytes());
        for e in &self.entries {
            for v in &e.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let metas: Vec<&EntryMeta> = self.entries.iter().map(|e| &e.meta).collect();
        out.extend_from_slice(&serde_json::to_vec(&metas)?);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("index file: {m}"));
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated"))? != INDEX_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated"))?;
        if version != INDEX_VERSION {
            return Err(Error::Data(format!("index file: unsupported version {version}")));
        }
        let dim = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        let n = r.u64().ok_or_else(|| bad("truncated"))? as usize;
        let hlen = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        let hash = std::str::from_utf8(r.take(hlen).ok_or_else(|| bad("truncated"))?)
            .map_err(|_| bad("hash is not utf-8"))?
            .to_string();
        let l_kcm = f64::from_le_bytes(r.take(8).ok_or_else(|| bad("truncated"))?.try_into().expect("8 bytes"));
        let raw = r.take(n.checked_mul(dim * 4).ok_or_else(|| bad("size overflow"))?).ok_or_else(|| bad("truncated vectors"))?;
        let metas: Vec<EntryMeta> = serde_json::from_slice(&bytes[r.pos..])?;
        if metas.len() != n {
            return Err(bad("metadata count differs from header"));
        }
        let entries = metas
            .into_iter()
            .zip(raw.chunks_exact(dim * 4))
            .map(|(meta, chunk)| IndexEntry {
                meta,
                vector: chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
            })
            .collect();
        Self::new(entries, Fingerprint { checkpoint_sha256: hash, l_kcm, dim })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// Embeds every frame. Unreadable frames are reported and skipped;
/// duplicate source ids reject the whole build.
pub fn build_index(frames: &[FrameRef], source: &dyn FrameSource, embedder: &dyn Embedder) -> Result<BuildReport> {
    let mut seen = HashSet::new();
    let dups: Vec<String> = frames
        .iter()
        .map(FrameRef::source_id)
        .filter(|id| !seen.insert(id.clone()))
        .collect();
    if !dups.is_empty() {
        return Err(Error::Duplicate(dups));
    }
    let mut failures = Vec::new();
    let mut loaded = Vec::new();
    for f in frames {
        match source.load(f) {
            Ok(img) => loaded.push((f, img)),
            Err(e) => {
                log::warn!("skipping {}: {e}", f.source_id());
                failures.push((f.source_id(), e.to_string()));
            }
        }
    }
    let mut entries = Vec::with_capacity(loaded.len());
    for chunk in loaded.chunks(16) {
        let imgs: Vec<&GrayscaleImage> = chunk.iter().map(|(_, img)| img).collect();
        let vecs = embedder.embed_batch(&imgs)?;
        for ((f, _), v) in chunk.iter().zip(vecs) {
            if v.norm() == 0.0 {
                failures.push((f.source_id(), "zero embedding".into()));
                continue;
            }
            entries.push(IndexEntry { meta: EntryMeta::from_frame(f), vector: v.values });
        }
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("no frame could be embedded ({} failures)", failures.len())));
    }
    Ok(BuildReport { index: RetrievalIndex::new(entries, embedder.fingerprint())?, failures })
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryResult {
    pub query: String,
    pub k: usize,
    pub fingerprint: Fingerprint,
    pub hits: Vec<SearchHit>,
}

/// Lays the query and its hits out in one row, each tile `tile` pixels
/// square, separated by a white gutter.
pub fn contact_sheet(query: &GrayscaleImage, hits: &[GrayscaleImage], tile: usize) -> Result<GrayscaleImage> {
    let gutter = 4;
    let n = hits.len() + 1;
    let width = n * tile + (n + 1) * gutter;
    let height = tile + 2 * gutter;
    let mut pixels = vec![1.0f32; width * height];
    for (i, img) in std::iter::once(query).chain(hits.iter()).enumerate() {
        let small = crate::preprocessing::resize_normalize(img, (tile, tile))?;
        let x0 = gutter + i * (tile + gutter);
        for y in 0..tile {
            for x in 0..tile {
                pixels[(gutter + y) * width + x0 + x] = small.get(x, y);
            }
        }
    }
    GrayscaleImage::new(width, height, pixels, "contact-sheet")
}

pub const CONTACT_TILE: usize = INPUT_SIZE / 2;
