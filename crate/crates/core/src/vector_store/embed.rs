use std::sync::OnceLock;
use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

use crate::http::{JsonClient, RetryPolicy, TransportError};
use crate::util::fnv1a64;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("text contains no tokens: `{0}`")]
    NoTokens(String),
    #[error("embedding has zero norm")]
    ZeroVector,
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("embedding dimension {actual} differs from pinned dimension {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("unexpected embedding response: {0}")]
    Response(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Dense embedding. Vectors produced by [`Embedder`]s are always normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    normalized: bool,
}

impl EmbeddingVector {
    /// Scales `values` to unit L2 norm.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbedError::ZeroVector);
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self {
            values,
            normalized: true,
        })
    }

    pub fn raw(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self {
            values,
            normalized: false,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Text embedding backend. Implementations must be safe to call concurrently.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;

    /// Output dimension, if known before the first call.
    fn dimension(&self) -> Option<usize>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut out = self.embed_batch(&[text])?;
        out.pop()
            .ok_or_else(|| EmbedError::Response("empty batch result".into()))
    }
}

pub const DEFAULT_LOCAL_DIM: usize = 256;

/// Offline signed feature-hashing embedder over unigrams and bigrams.
#[derive(Debug, Clone)]
pub struct LocalHashEmbedder {
    dim: usize,
    bigrams: bool,
}

impl Default for LocalHashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_LOCAL_DIM)
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Bucket and sign of one hashed feature.
pub fn hashed_feature(feature: &str, dim: usize) -> (usize, f64) {
    let h = fnv1a64(feature.as_bytes());
    let bucket = (h % dim as u64) as usize;
    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
    (bucket, sign)
}

impl LocalHashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, bigrams: true }
    }

    /// Unigram-only variant.
    pub fn without_bigrams(mut self) -> Self {
        self.bigrams = false;
        self
    }

    /// The hashed features of `text`: `u:<token>` and `b:<token> <token>`.
    pub fn features(&self, text: &str) -> Vec<String> {
        let tokens = tokenize(text);
        let mut features: Vec<String> = tokens.iter().map(|t| format!("u:{t}")).collect();
        if self.bigrams {
            features.extend(tokens.windows(2).map(|w| format!("b:{} {}", w[0], w[1])));
        }
        features
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let features = self.features(text);
        if features.is_empty() {
            return Err(EmbedError::NoTokens(text.to_string()));
        }
        let mut acc = vec![0.0; self.dim];
        for f in &features {
            let (bucket, sign) = hashed_feature(f, self.dim);
            acc[bucket] += sign;
        }
        EmbeddingVector::normalized(acc)
    }
}

impl Embedder for LocalHashEmbedder {
    fn name(&self) -> &str {
        "local-hash"
    }

    fn dimension(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts.iter().map(|t| self.embed_text(t)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct RemoteEmbedderConfig {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl RemoteEmbedderConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(30),
            max_in_flight: 4,
            // One initial attempt plus three retries.
            retry: RetryPolicy::attempts(4),
        }
    }
}

/// HTTP embedding backend. Sends `{"model", "input": [texts]}` and accepts
/// either `{"data": [{"embedding": [...]}, ...]}` or `{"embeddings": [[...], ...]}`.
/// The dimension of the first response is pinned for the client's lifetime.
#[derive(Debug)]
pub struct RemoteEmbedder {
    config: RemoteEmbedderConfig,
    client: JsonClient,
    pinned_dim: OnceLock<usize>,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedderConfig) -> Result<Self, EmbedError> {
        let client = JsonClient::new(
            config.timeout,
            config.api_key.clone(),
            config.retry,
            config.max_in_flight,
        )?;
        Ok(Self {
            config,
            client,
            pinned_dim: OnceLock::new(),
        })
    }

    fn parse_response(&self, value: &Value, expected: usize) -> Result<Vec<Vec<f64>>, EmbedError> {
        let rows: Vec<&Value> = if let Some(data) = value.get("data").and_then(Value::as_array) {
            let mut indexed: Vec<(u64, &Value)> = data
                .iter()
                .enumerate()
                .map(|(i, item)| {
                    let idx = item
                        .get("index")
                        .and_then(Value::as_u64)
                        .unwrap_or(i as u64);
                    item.get("embedding")
                        .map(|e| (idx, e))
                        .ok_or_else(|| EmbedError::Response("data item without `embedding`".into()))
                })
                .collect::<Result<_, _>>()?;
            indexed.sort_by_key(|(i, _)| *i);
            indexed.into_iter().map(|(_, e)| e).collect()
        } else if let Some(list) = value.get("embeddings").and_then(Value::as_array) {
            list.iter().collect()
        } else {
            return Err(EmbedError::Response(
                "missing `data` or `embeddings`".into(),
            ));
        };
        if rows.len() != expected {
            return Err(EmbedError::Response(format!(
                "expected {expected} embeddings, got {}",
                rows.len()
            )));
        }
        rows.into_iter()
            .map(|row| {
                row.as_array()
                    .ok_or_else(|| EmbedError::Response("embedding is not an array".into()))?
                    .iter()
                    .map(|x| {
                        x.as_f64()
                            .ok_or_else(|| EmbedError::Response("non-numeric component".into()))
                    })
                    .collect()
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn dimension(&self) -> Option<usize> {
        self.pinned_dim.get().copied()
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.iter().any(|t| t.is_empty()) {
            return Err(EmbedError::EmptyText);
        }
        if texts.is_empty() {
            return Ok(vec![]);
        }
        let body = json!({ "model": self.config.model, "input": texts });
        let response = self.client.post_json(&self.config.url, &body)?;
        let rows = self.parse_response(&response, texts.len())?;
        rows.into_iter()
            .map(|row| {
                let pinned = *self.pinned_dim.get_or_init(|| row.len());
                if row.len() != pinned {
                    return Err(EmbedError::Dimension {
                        expected: pinned,
                        actual: row.len(),
                    });
                }
                EmbeddingVector::normalized(row)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http::test_server::{dead_url, serve};

    fn cos(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
        a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn deterministic_and_normalized() {
        let e = LocalHashEmbedder::default();
        let a = e.embed("category: car | count: 1").unwrap();
        assert_eq!(a, e.embed("category: car | count: 1").unwrap());
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert_eq!(a.dim(), 256);
        assert!((cos(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_tokenless_inputs_rejected() {
        let e = LocalHashEmbedder::default();
        assert!(matches!(e.embed(""), Err(EmbedError::EmptyText)));
        assert!(matches!(e.embed(" | ;; "), Err(EmbedError::NoTokens(_))));
    }

    #[test]
    fn tokenizer_splits_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("Car parked-on ROAD; x1"),
            ["car", "parked", "on", "road", "x1"]
        );
    }

    #[test]
    fn disjoint_texts_without_collisions_are_orthogonal() {
        let e = LocalHashEmbedder::default();
        let (a, b) = ("red car", "green tree");
        let buckets = |t: &str| -> Vec<usize> {
            e.features(t)
                .iter()
                .map(|f| hashed_feature(f, 256).0)
                .collect()
        };
        let (ba, bb) = (buckets(a), buckets(b));
        assert!(
            ba.iter().all(|x| !bb.contains(x)),
            "fixture has a hash collision"
        );
        assert_eq!(cos(&e.embed(a).unwrap(), &e.embed(b).unwrap()), 0.0);
    }

    #[test]
    fn repeated_token_matches_single_token_direction() {
        let uni = LocalHashEmbedder::default().without_bigrams();
        let c = cos(&uni.embed("car car").unwrap(), &uni.embed("car").unwrap());
        assert!((c - 1.0).abs() < 1e-12);

        // With bigrams, "car car" = 2·s_u·e_u + s_b·e_b; when the buckets
        // differ the cosine with "car" is 2/sqrt(5).
        let full = LocalHashEmbedder::default();
        let (bu, _) = hashed_feature("u:car", 256);
        let (bb, _) = hashed_feature("b:car car", 256);
        assert_ne!(bu, bb);
        let c = cos(&full.embed("car car").unwrap(), &full.embed("car").unwrap());
        assert!((c - 2.0 / 5f64.sqrt()).abs() < 1e-12, "{c}");
    }

    fn fast_config(url: String) -> RemoteEmbedderConfig {
        let mut c = RemoteEmbedderConfig::new(url, "test-embed");
        c.retry = RetryPolicy {
            max_attempts: 4,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(2),
        };
        c
    }

    #[test]
    fn remote_embedder_parses_and_pins_dimension() {
        let server = serve(vec![
            (
                200,
                r#"{"data":[{"index":1,"embedding":[0,2]},{"index":0,"embedding":[3,4]}]}"#.into(),
            ),
            (200, r#"{"embeddings":[[1,0,0]]}"#.into()),
        ]);
        let e = RemoteEmbedder::new(fast_config(server.url.clone())).unwrap();
        assert_eq!(e.dimension(), None);
        let v = e.embed_batch(&["a", "b"]).unwrap();
        assert_eq!(v[0].values(), &[0.6, 0.8]);
        assert_eq!(v[1].values(), &[0.0, 1.0]);
        assert_eq!(e.dimension(), Some(2));
        assert!(matches!(
            e.embed("c"),
            Err(EmbedError::Dimension {
                expected: 2,
                actual: 3
            })
        ));
        let reqs = server.requests.lock().unwrap();
        assert!(reqs[0].contains(r#""input":["a","b"]"#), "{}", reqs[0]);
        assert!(reqs[0].contains(r#""model":"test-embed""#));
    }

    #[test]
    fn remote_embedder_reports_retry_metadata() {
        let e = RemoteEmbedder::new(fast_config(dead_url())).unwrap();
        match e.embed("x") {
            Err(EmbedError::Transport(TransportError::Exhausted { attempts: 4, .. })) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
