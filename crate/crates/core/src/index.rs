//! Exact dense retrieval over item texts.
//!
//! Vectors are held as little-endian `f32`, which is also the on-disk
//! layout:
//!
//! ```text
//! magic   4 bytes  "RGIX"
//! version u32 LE
//! dim     u32 LE
//! count   u64 LE
//! count × { id_len u32 LE, id bytes (UTF-8), dim × f32 LE }
//! ```

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ItemCatalog;
use crate::embed::{Embedder, EmbeddingVector, PartialEmbedError};

pub const INDEX_MAGIC: [u8; 4] = *b"RGIX";
pub const INDEX_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("empty catalog")]
    EmptyCatalog,
    #[error("k must be >= 1")]
    ZeroK,
    #[error("dimension mismatch: index has {index}, query has {query}")]
    DimMismatch { index: usize, query: usize },
    #[error("embedding failed after {embedded} of {total} items: {source}")]
    Embed {
        embedded: usize,
        total: usize,
        #[source]
        source: crate::embed::EmbedError,
    },
    #[error("duplicate item_id `{0}` in index")]
    DuplicateId(String),
    #[error("not an index file (bad magic)")]
    BadMagic,
    #[error("unsupported index format version {found} (expected {INDEX_VERSION})")]
    Version { found: u32 },
    #[error("truncated header")]
    TruncatedHeader,
    #[error("truncated at entry {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after last entry")]
    TrailingBytes(usize),
    #[error("entry {0}: item id is not UTF-8")]
    BadId(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexMode {
    #[default]
    Exact,
}

/// One retrieved item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub item_id: String,
    pub score: f64,
}

/// Retrieval output for one query: hits by non-increasing score, ties by
/// ascending item id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub hits: Vec<Hit>,
}

impl RankedList {
    /// Zero-based rank of `item_id`, if retrieved.
    pub fn position(&self, item_id: &str) -> Option<usize> {
        self.hits.iter().position(|h| h.item_id == item_id)
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.item_id.as_str())
    }
}

/// Immutable exact-search index.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    mode: IndexMode,
    ids: Vec<String>,
    vectors: Vec<f32>,
    norms: Vec<f64>,
}

impl VectorIndex {
    /// Builds an index from `(item_id, vector)` pairs, keeping their order.
    pub fn from_entries(dim: usize, entries: Vec<(String, Vec<f32>)>) -> Result<Self, IndexError> {
        let mut seen = std::collections::HashSet::with_capacity(entries.len());
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len() * dim);
        for (id, vector) in entries {
            if vector.len() != dim {
                return Err(IndexError::DimMismatch {
                    index: dim,
                    query: vector.len(),
                });
            }
            if !seen.insert(id.clone()) {
                return Err(IndexError::DuplicateId(id));
            }
            ids.push(id);
            vectors.extend(vector);
        }
        let norms = vectors
            .chunks_exact(dim)
            .map(|v| v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt())
            .collect();
        Ok(Self {
            dim,
            mode: IndexMode::Exact,
            ids,
            vectors,
            norms,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, pos: usize) -> &[f32] {
        &self.vectors[pos * self.dim..(pos + 1) * self.dim]
    }

    /// Stored vector widened to `f64`.
    pub fn embedding(&self, pos: usize) -> EmbeddingVector {
        EmbeddingVector::from_raw(self.vector(pos).iter().map(|&x| f64::from(x)).collect())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.vectors.chunks_exact(self.dim))
    }

    fn score(&self, pos: usize, query: &[f64], query_norm: f64) -> f64 {
        let dot: f64 = self
            .vector(pos)
            .iter()
            .zip(query)
            .map(|(&x, &q)| f64::from(x) * q)
            .sum();
        let denom = self.norms[pos] * query_norm;
        if denom == 0.0 {
            0.0
        } else {
            (dot / denom).clamp(-1.0, 1.0)
        }
    }

    /// Exact top-`k` by cosine; `min(k, len)` hits.
    pub fn retrieve(&self, query_id: &str, query: &EmbeddingVector, k: usize) -> Result<RankedList, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimMismatch {
                index: self.dim,
                query: query.dim(),
            });
        }
        let q = query.values();
        let q_norm = query.norm();
        let mut scored: Vec<(f64, usize)> = (0..self.len()).map(|pos| (self.score(pos, q, q_norm), pos)).collect();
        let by_rank = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            b.0.total_cmp(&a.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_rank);
            scored.truncate(k);
        }
        scored.sort_unstable_by(by_rank);
        Ok(RankedList {
            query_id: query_id.to_string(),
            hits: scored
                .into_iter()
                .map(|(score, pos)| Hit {
                    item_id: self.ids[pos].clone(),
                    score,
                })
                .collect(),
        })
    }

    /// Runs [`VectorIndex::retrieve`] for many queries in parallel; output
    /// order follows input order.
    pub fn retrieve_many(
        &self,
        queries: &[(String, EmbeddingVector)],
        k: usize,
    ) -> Result<Vec<RankedList>, IndexError> {
        queries
            .par_iter()
            .map(|(id, q)| self.retrieve(id, q, k))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let id_bytes: usize = self.ids.iter().map(|id| 4 + id.len()).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + id_bytes + self.vectors.len() * 4);
        out.extend_from_slice(&INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for (id, vector) in self.entries() {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in vector {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && bytes[..4] != INDEX_MAGIC {
                return Err(IndexError::BadMagic);
            }
            return Err(IndexError::TruncatedHeader);
        }
        if bytes[..4] != INDEX_MAGIC {
            return Err(IndexError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != INDEX_VERSION {
            return Err(IndexError::Version { found: version });
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;

        let mut cursor = HEADER_LEN;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for i in 0..count {
            let take = |cursor: &mut usize, n: usize| -> Result<&[u8], IndexError> {
                let end = cursor.checked_add(n).filter(|&e| e <= bytes.len()).ok_or(IndexError::Truncated(i))?;
                let slice = &bytes[*cursor..end];
                *cursor = end;
                Ok(slice)
            };
            let id_len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
            let id = std::str::from_utf8(take(&mut cursor, id_len)?)
                .map_err(|_| IndexError::BadId(i))?
                .to_string();
            let raw = take(&mut cursor, dim * 4)?;
            let vector = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push((id, vector));
        }
        if cursor != bytes.len() {
            return Err(IndexError::TrailingBytes(bytes.len() - cursor));
        }
        Self::from_entries(dim, entries)
    }
}

/// Embeds every catalog item's index text (`"TITLE. ABSTRACT"`), keeping
/// catalog order.
pub fn build_index(catalog: &ItemCatalog, embedder: &Embedder) -> Result<VectorIndex, IndexError> {
    if catalog.is_empty() {
        return Err(IndexError::EmptyCatalog);
    }
    let texts: Vec<String> = catalog.items().iter().map(|item| item.index_text()).collect();
    let vectors = embedder
        .embed_tracked(&texts)
        .map_err(|PartialEmbedError { embedded, source }| IndexError::Embed {
            embedded,
            total: texts.len(),
            source,
        })?;
    let entries = catalog
        .items()
        .iter()
        .zip(vectors)
        .map(|(item, v)| (item.item_id.clone(), v.values().iter().map(|&x| x as f32).collect()))
        .collect();
    VectorIndex::from_entries(embedder.dim(), entries)
}

pub fn save_index(index: &VectorIndex, path: &Path) -> Result<(), IndexError> {
    std::fs::write(path, index.to_bytes()).map_err(|source| IndexError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_index(path: &Path) -> Result<VectorIndex, IndexError> {
    let bytes = std::fs::read(path).map_err(|source| IndexError::Io {
        path: path.display().to_string(),
        source,
    })?;
    VectorIndex::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Item;
    use crate::embed::EmbedderConfig;

    fn catalog(n: usize) -> ItemCatalog {
        let items = (0..n)
            .map(|i| Item {
                item_id: format!("m{i}"),
                title: format!("Movie {i}"),
                year: None,
                abstract_text: format!("story number {i} about topic {}", i % 3),
            })
            .collect();
        ItemCatalog::from_items(items).unwrap()
    }

    fn embedder() -> Embedder {
        Embedder::new(EmbedderConfig::hashed(16)).unwrap()
    }

    #[test]
    fn five_items_five_entries() {
        let index = build_index(&catalog(5), &embedder()).unwrap();
        assert_eq!(index.len(), 5);
        assert_eq!(index.dim(), 16);
    }

    #[test]
    fn empty_catalog() {
        let err = build_index(&ItemCatalog::default(), &embedder()).unwrap_err();
        assert_eq!(err.to_string(), "empty catalog");
    }

    #[test]
    fn self_query_ranks_first() {
        let index = build_index(&catalog(5), &embedder()).unwrap();
        let q = index.embedding(3);
        let ranked = index.retrieve("q", &q, 1).unwrap();
        assert_eq!(ranked.hits[0].item_id, "m3");
        assert!((ranked.hits[0].score - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn k_clamped_to_size() {
        let index = build_index(&catalog(5), &embedder()).unwrap();
        let q = index.embedding(0);
        assert_eq!(index.retrieve("q", &q, 50).unwrap().hits.len(), 5);
        assert!(matches!(index.retrieve("q", &q, 0), Err(IndexError::ZeroK)));
    }

    #[test]
    fn ties_break_on_ascending_id() {
        let entries = vec![
            ("c".to_string(), vec![1.0, 0.0]),
            ("a".to_string(), vec![1.0, 0.0]),
            ("b".to_string(), vec![0.0, 1.0]),
        ];
        let index = VectorIndex::from_entries(2, entries).unwrap();
        let q = EmbeddingVector::from_raw(vec![1.0, 0.0]);
        let ids: Vec<_> = index.retrieve("q", &q, 3).unwrap().hits.into_iter().map(|h| h.item_id).collect();
        assert_eq!(ids, ["a", "c", "b"]);
        let top1 = index.retrieve("q", &q, 1).unwrap();
        assert_eq!(top1.hits[0].item_id, "a");
    }

    #[test]
    fn query_dim_mismatch() {
        let index = build_index(&catalog(3), &embedder()).unwrap();
        let q = EmbeddingVector::from_raw(vec![1.0; 4]);
        assert!(matches!(index.retrieve("q", &q, 1), Err(IndexError::DimMismatch { .. })));
    }

    #[test]
    fn byte_round_trip() {
        let index = build_index(&catalog(5), &embedder()).unwrap();
        let bytes = index.to_bytes();
        let back = VectorIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back, index);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_reports_entry() {
        let index = build_index(&catalog(5), &embedder()).unwrap();
        let bytes = index.to_bytes();
        let entry_len = 4 + 2 + 16 * 4;
        let cut = HEADER_LEN + 2 * entry_len + 10;
        let err = VectorIndex::from_bytes(&bytes[..cut]).unwrap_err();
        assert_eq!(err.to_string(), "truncated at entry 2");
        assert!(matches!(VectorIndex::from_bytes(&bytes[..7]), Err(IndexError::TruncatedHeader)));
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = build_index(&catalog(2), &embedder()).unwrap().to_bytes();
        bytes[4] = 9;
        assert!(matches!(VectorIndex::from_bytes(&bytes), Err(IndexError::Version { found: 9 })));
        bytes[0] = b'X';
        assert!(matches!(VectorIndex::from_bytes(&bytes), Err(IndexError::BadMagic)));
    }
}
