//! Chunk embeddings and exact top-k cosine retrieval.

mod embed;
mod persist;

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::chunks::KnowledgeChunk;

pub use embed::{
    hashed_feature, tokenize, EmbedError, Embedder, EmbeddingVector, LocalHashEmbedder,
    RemoteEmbedder, RemoteEmbedderConfig, DEFAULT_LOCAL_DIM,
};
pub use persist::{load_index, save_index, FORMAT_VERSION, MAGIC};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("chunk id `{0}` is already indexed")]
    Conflict(String),
    #[error("vector dimension {actual} does not match index dimension {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("zero vector cannot be indexed for `{0}`")]
    ZeroVector(String),
    #[error("embedding `{chunk_id}`: {source}")]
    Embed {
        chunk_id: String,
        #[source]
        source: EmbedError,
    },
    #[error("not an index file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported index format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("index checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("index file truncated: {0}")]
    Truncated(String),
    #[error("corrupt index payload for entry {entry}: {message}")]
    Payload { entry: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub chunk_id: String,
    pub vector: Vec<f32>,
    pub payload: KnowledgeChunk,
}

/// Flat in-memory index. Vectors are normalized at insert and stored as
/// `f32`; similarity is the cosine of the stored vectors computed in `f64`.
#[derive(Debug, Clone, Default)]
pub struct Index {
    dim: usize,
    entries: Vec<IndexEntry>,
    inv_norms: Vec<f64>,
    positions: HashMap<String, usize>,
}

impl PartialEq for Index {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.entries == other.entries
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievedChunk {
    pub chunk_id: String,
    pub score: f64,
    pub payload: KnowledgeChunk,
}

/// Ranked hits: scores non-increasing, ties by chunk id ascending.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RetrievalResult {
    pub hits: Vec<RetrievedChunk>,
}

impl RetrievalResult {
    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn chunk_ids(&self) -> Vec<String> {
        self.hits.iter().map(|h| h.chunk_id.clone()).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.hits.iter().map(|h| h.score).collect()
    }
}

fn rank_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

impl Index {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, chunk_id: &str) -> Option<&IndexEntry> {
        self.positions.get(chunk_id).map(|&i| &self.entries[i])
    }

    /// Inserts an embedding, normalizing it first.
    pub fn insert(
        &mut self,
        chunk_id: &str,
        vector: &EmbeddingVector,
        payload: KnowledgeChunk,
    ) -> Result<(), IndexError> {
        let values: Vec<f32> = if vector.is_normalized() {
            vector.values().iter().map(|&v| v as f32).collect()
        } else {
            EmbeddingVector::normalized(vector.values().to_vec())
                .map_err(|_| IndexError::ZeroVector(chunk_id.to_string()))?
                .values()
                .iter()
                .map(|&v| v as f32)
                .collect()
        };
        self.insert_stored(chunk_id.to_string(), values, payload)
    }

    pub(crate) fn insert_stored(
        &mut self,
        chunk_id: String,
        vector: Vec<f32>,
        payload: KnowledgeChunk,
    ) -> Result<(), IndexError> {
        if vector.len() != self.dim {
            return Err(IndexError::Dimension {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if self.positions.contains_key(&chunk_id) {
            return Err(IndexError::Conflict(chunk_id));
        }
        let norm = vector
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(IndexError::ZeroVector(chunk_id));
        }
        self.positions.insert(chunk_id.clone(), self.entries.len());
        self.inv_norms.push(1.0 / norm);
        self.entries.push(IndexEntry {
            chunk_id,
            vector,
            payload,
        });
        Ok(())
    }

    /// Exact top-k by cosine similarity over every entry.
    pub fn top_k(&self, query: &EmbeddingVector, k: usize) -> Result<RetrievalResult, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if self.entries.is_empty() {
            return Ok(RetrievalResult::default());
        }
        if query.dim() != self.dim {
            return Err(IndexError::Dimension {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let q = query.values();
        let q_norm = query.norm();
        let mut scored: Vec<(f64, usize)> = self
            .entries
            .iter()
            .zip(&self.inv_norms)
            .enumerate()
            .map(|(i, (entry, inv))| {
                let dot: f64 = q
                    .iter()
                    .zip(&entry.vector)
                    .map(|(a, &b)| a * b as f64)
                    .sum();
                let score = if q_norm == 0.0 {
                    0.0
                } else {
                    dot * inv / q_norm
                };
                (score, i)
            })
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            rank_order(
                (a.0, &self.entries[a.1].chunk_id),
                (b.0, &self.entries[b.1].chunk_id),
            )
        };
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(RetrievalResult {
            hits: scored
                .into_iter()
                .map(|(score, i)| RetrievedChunk {
                    chunk_id: self.entries[i].chunk_id.clone(),
                    score,
                    payload: self.entries[i].payload.clone(),
                })
                .collect(),
        })
    }
}

/// Text embedded for a chunk. Pooled multi-image indexes prefix the image id
/// so that chunks of the same category in different images stay distinct.
pub fn chunk_embedding_text(chunk: &KnowledgeChunk, pooled: bool) -> String {
    if pooled {
        format!("image: {} | {}", chunk.image_id, chunk.canonical_text)
    } else {
        chunk.canonical_text.clone()
    }
}

/// Embeds `(chunk_id, text, payload)` entries into a new index.
pub fn build_index(
    entries: Vec<(String, String, KnowledgeChunk)>,
    embedder: &dyn Embedder,
) -> Result<Index, IndexError> {
    let texts: Vec<&str> = entries.iter().map(|(_, t, _)| t.as_str()).collect();
    let mut seen = std::collections::HashSet::new();
    for (id, _, _) in &entries {
        if !seen.insert(id.as_str()) {
            return Err(IndexError::Conflict(id.clone()));
        }
    }
    if entries.is_empty() {
        return Ok(Index::new(embedder.dimension().unwrap_or(0)));
    }
    let vectors = embedder
        .embed_batch(&texts)
        .map_err(|source| IndexError::Embed {
            chunk_id: entries.first().map(|e| e.0.clone()).unwrap_or_default(),
            source,
        })?;
    let dim = vectors[0].dim();
    let mut index = Index::new(dim);
    for ((id, _, payload), v) in entries.into_iter().zip(vectors) {
        index.insert(&id, &v, payload)?;
    }
    Ok(index)
}

/// Index over the chunks of one image or a pooled collection.
pub fn index_chunks(
    chunks: &[KnowledgeChunk],
    pooled: bool,
    embedder: &dyn Embedder,
) -> Result<Index, IndexError> {
    build_index(
        chunks
            .iter()
            .map(|c| {
                (
                    c.chunk_id.clone(),
                    chunk_embedding_text(c, pooled),
                    c.clone(),
                )
            })
            .collect(),
        embedder,
    )
}
