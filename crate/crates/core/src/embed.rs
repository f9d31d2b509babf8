//! Unit-normalized text embeddings from a remote endpoint or a
//! deterministic hashing embedder used in tests and desk-scale runs.

use std::hash::Hasher;

use fnv::FnvHasher;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::http::{self, HttpError, RetryPolicy, Semaphore};

/// Environment variable holding the bearer token for the remote backend.
pub const EMBED_TOKEN_ENV: &str = "RECGEN_EMBED_TOKEN";

/// Seed mixed into every token hash of the hashed-test backend.
pub const HASH_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbedError {
    #[error("no texts to embed")]
    NoTexts,
    #[error("text {index} is empty")]
    EmptyText { index: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("invalid embedder config: {0}")]
    Config(String),
    #[error("embedding endpoint returned {got} vectors for {sent} inputs")]
    CountMismatch { sent: usize, got: usize },
    #[error("malformed embedding response: {0}")]
    Response(String),
    #[error("zero vector for text {index}")]
    ZeroVector { index: usize },
    #[error(transparent)]
    Http(#[from] HttpError),
}

/// An L2-normalized embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalizes `values` to unit length. Returns `None` for a zero vector.
    pub fn normalized(mut values: Vec<f64>) -> Option<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Some(Self(values))
    }

    /// Wraps values that are already unit length, e.g. when read back from
    /// an index. No normalization is applied.
    pub fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl std::ops::Neg for &EmbeddingVector {
    type Output = EmbeddingVector;
    fn neg(self) -> EmbeddingVector {
        EmbeddingVector(self.0.iter().map(|v| -v).collect())
    }
}

/// Cosine similarity. Inputs are unit vectors, but the product is still
/// divided by both norms so that values read back at reduced precision
/// score exactly 1 against themselves.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(cosine_slices(a.values(), b.values()))
}

pub(crate) fn cosine_slices(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedBackend {
    Remote,
    HashedTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    pub backend: EmbedBackend,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default = "default_model")]
    pub model_name: String,
    pub dim: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_model() -> String {
    "hashed-test".into()
}
fn default_batch_size() -> usize {
    64
}
fn default_in_flight() -> usize {
    4
}
fn default_timeout() -> u64 {
    60
}

impl EmbedderConfig {
    pub fn hashed(dim: usize) -> Self {
        Self {
            backend: EmbedBackend::HashedTest,
            endpoint: None,
            model_name: default_model(),
            dim,
            batch_size: default_batch_size(),
            max_in_flight: default_in_flight(),
            timeout_secs: default_timeout(),
            retry: RetryPolicy::default(),
        }
    }

    pub fn remote(endpoint: impl Into<String>, model_name: impl Into<String>, dim: usize) -> Self {
        Self {
            backend: EmbedBackend::Remote,
            endpoint: Some(endpoint.into()),
            model_name: model_name.into(),
            ..Self::hashed(dim)
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim == 0 {
            return Err(EmbedError::Config("dim must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(EmbedError::Config("batch_size must be > 0".into()));
        }
        if self.backend == EmbedBackend::Remote && self.endpoint.is_none() {
            return Err(EmbedError::Config("remote backend requires endpoint".into()));
        }
        Ok(())
    }
}

/// Tokens of the hashed embedder: lowercase alphanumeric runs.
fn hash_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn token_hash(token: &str) -> u64 {
    let mut hasher = FnvHasher::default();
    hasher.write(&HASH_SEED.to_le_bytes());
    hasher.write(token.as_bytes());
    hasher.finish()
}

/// Feature-hashing embedding: every token adds ±1 to bucket `hash % dim`,
/// the sign taken from the hash's top bit. A vector that sums to zero gets
/// the whole trimmed text hashed in as one extra token.
pub fn hashed_embedding(text: &str, dim: usize) -> Option<EmbeddingVector> {
    let mut acc = vec![0.0f64; dim];
    for token in hash_tokens(text) {
        add_token(&mut acc, &token);
    }
    // no tokens, or tokens whose signs cancelled out
    if acc.iter().all(|&v| v == 0.0) {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return None;
        }
        add_token(&mut acc, trimmed);
    }
    EmbeddingVector::normalized(acc)
}

fn add_token(acc: &mut [f64], token: &str) {
    let h = token_hash(token);
    let bucket = (h % acc.len() as u64) as usize;
    acc[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
}

/// Embedding client built from a config.
pub struct Embedder {
    config: EmbedderConfig,
    remote: Option<RemoteState>,
}

struct RemoteState {
    client: reqwest::blocking::Client,
    token: Option<String>,
    in_flight: Semaphore,
}

impl std::fmt::Debug for Embedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Embedder").field("config", &self.config).finish()
    }
}

/// Partial progress carried by a failed batch run.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{source} ({embedded} text(s) embedded before the failure)")]
pub struct PartialEmbedError {
    pub embedded: usize,
    #[source]
    pub source: EmbedError,
}

impl Embedder {
    pub fn new(config: EmbedderConfig) -> Result<Self, EmbedError> {
        config.validate()?;
        let remote = match config.backend {
            EmbedBackend::HashedTest => None,
            EmbedBackend::Remote => Some(RemoteState {
                client: http::build_client(config.timeout_secs)?,
                token: std::env::var(EMBED_TOKEN_ENV).ok(),
                in_flight: Semaphore::new(config.max_in_flight),
            }),
        };
        Ok(Self { config, remote })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        Ok(self.embed(&[text])?.pop().expect("one vector per text"))
    }

    /// One unit vector per text, in input order.
    pub fn embed<S: AsRef<str> + Sync>(&self, texts: &[S]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        self.embed_tracked(texts).map_err(|e| e.source)
    }

    /// Like [`Embedder::embed`], but a failure reports how many leading
    /// texts were embedded before it.
    pub fn embed_tracked<S: AsRef<str> + Sync>(
        &self,
        texts: &[S],
    ) -> Result<Vec<EmbeddingVector>, PartialEmbedError> {
        let fail = |embedded, source| PartialEmbedError { embedded, source };
        if texts.is_empty() {
            return Err(fail(0, EmbedError::NoTexts));
        }
        if let Some(index) = texts.iter().position(|t| t.as_ref().trim().is_empty()) {
            return Err(fail(0, EmbedError::EmptyText { index }));
        }

        let batches: Vec<(usize, &[S])> = texts
            .chunks(self.config.batch_size)
            .enumerate()
            .map(|(i, chunk)| (i * self.config.batch_size, chunk))
            .collect();
        let results: Vec<Result<Vec<EmbeddingVector>, EmbedError>> = batches
            .par_iter()
            .map(|&(offset, chunk)| self.embed_batch(offset, chunk))
            .collect();

        let mut out = Vec::with_capacity(texts.len());
        for result in results {
            match result {
                Ok(vectors) => out.extend(vectors),
                Err(source) => return Err(fail(out.len(), source)),
            }
        }
        Ok(out)
    }

    fn embed_batch<S: AsRef<str>>(&self, offset: usize, chunk: &[S]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        match &self.remote {
            None => chunk
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    hashed_embedding(t.as_ref(), self.config.dim)
                        .ok_or(EmbedError::ZeroVector { index: offset + i })
                })
                .collect(),
            Some(remote) => {
                let _permit = remote.in_flight.acquire();
                self.remote_batch(remote, offset, chunk)
            }
        }
    }

    fn remote_batch<S: AsRef<str>>(
        &self,
        remote: &RemoteState,
        offset: usize,
        chunk: &[S],
    ) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let inputs: Vec<&str> = chunk.iter().map(AsRef::as_ref).collect();
        let body = serde_json::json!({ "model": self.config.model_name, "input": inputs });
        let url = self.config.endpoint.as_deref().expect("validated");
        let response = http::post_json(&remote.client, url, remote.token.as_deref(), &body, self.config.retry)?;
        let vectors = parse_embeddings_response(&response)?;
        if vectors.len() != chunk.len() {
            return Err(EmbedError::CountMismatch {
                sent: chunk.len(),
                got: vectors.len(),
            });
        }
        vectors
            .into_iter()
            .enumerate()
            .map(|(i, values)| {
                if values.len() != self.config.dim {
                    return Err(EmbedError::DimMismatch {
                        expected: self.config.dim,
                        actual: values.len(),
                    });
                }
                EmbeddingVector::normalized(values).ok_or(EmbedError::ZeroVector { index: offset + i })
            })
            .collect()
    }
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

/// `{"data": [{"embedding": [...], "index": i}, ...]}`, reordered by `index`
/// when present.
fn parse_embeddings_response(value: &serde_json::Value) -> Result<Vec<Vec<f64>>, EmbedError> {
    let mut parsed: EmbeddingsResponse =
        serde_json::from_value(value.clone()).map_err(|e| EmbedError::Response(e.to_string()))?;
    if parsed.data.iter().all(|d| d.index.is_some()) {
        parsed.data.sort_by_key(|d| d.index);
    }
    Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
}

/// Embeds `texts` with a backend built from `config`.
pub fn embed_texts<S: AsRef<str> + Sync>(
    config: &EmbedderConfig,
    texts: &[S],
) -> Result<Vec<EmbeddingVector>, EmbedError> {
    Embedder::new(config.clone())?.embed(texts)
}
