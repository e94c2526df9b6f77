//! Embedding backends, chunking and cosine top-k retrieval.

mod chunk;
mod hashing;
mod index;
mod remote;

use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retry::RetryPolicy;

pub use chunk::{chunk_text, Chunk, ChunkKey};
pub use hashing::HashingEmbedder;
pub use index::{EmbeddingIndex, IndexConfig, IndexHeader, QueryKey};
pub use remote::RemoteEmbedder;

pub const DEFAULT_CHUNK_WINDOW: usize = 512;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("embedding backend rejected the request: {0}")]
    BackendRejected(String),
    #[error("cannot embed empty text (input #{0})")]
    EmptyText(usize),
    #[error("backend returned {got} vectors for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("backend returned a non-finite value")]
    NonFinite,
    #[error("unknown patient {0:?}")]
    UnknownPatient(String),
    #[error("unknown query {0}")]
    UnknownQuery(String),
    #[error("k must be positive")]
    InvalidK,
    #[error("index file error: {0}")]
    Format(String),
    #[error("index does not cover the corpus: {0}")]
    Incomplete(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EmbeddingError {
    pub fn code(&self) -> &'static str {
        match self {
            EmbeddingError::ZeroVector => "ZERO_VECTOR",
            EmbeddingError::DimensionMismatch { .. } => "DIMENSION_MISMATCH",
            EmbeddingError::BackendUnavailable(_) => "BACKEND_UNAVAILABLE",
            EmbeddingError::BackendRejected(_) => "BACKEND_ERROR",
            EmbeddingError::EmptyText(_) => "EMPTY_TEXT",
            EmbeddingError::CountMismatch { .. } | EmbeddingError::NonFinite => "BACKEND_ERROR",
            EmbeddingError::UnknownPatient(_) => "UNKNOWN_PATIENT",
            EmbeddingError::UnknownQuery(_) => "UNKNOWN_QUERY",
            EmbeddingError::InvalidK => "INVALID_K",
            EmbeddingError::Format(_) | EmbeddingError::Incomplete(_) => "INDEX_FORMAT",
            EmbeddingError::Io(_) => "IO_ERROR",
        }
    }
}

/// A dense embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector(pub Vec<f32>);

impl Vector {
    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// Scales to unit length; zero vectors are returned unchanged.
    pub fn normalized(mut self) -> Self {
        let norm = self.norm();
        if norm > 0.0 {
            for v in &mut self.0 {
                *v = (*v as f64 / norm) as f32;
            }
        }
        self
    }

    /// Component-wise mean, re-normalized.
    pub fn mean_pool(vectors: &[Vector]) -> Option<Vector> {
        let first = vectors.first()?;
        let dim = first.dimension();
        let mut acc = vec![0f64; dim];
        for v in vectors {
            for (a, &x) in acc.iter_mut().zip(&v.0) {
                *a += x as f64;
            }
        }
        let n = vectors.len() as f64;
        Some(Vector(acc.into_iter().map(|a| (a / n) as f32).collect()).normalized())
    }
}

/// `dot(a, b) / (|a| |b|)`, computed in f64 and clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &Vector, b: &Vector) -> Result<f64, EmbeddingError> {
    if a.dimension() != b.dimension() {
        return Err(EmbeddingError::DimensionMismatch {
            left: a.dimension(),
            right: b.dimension(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Text embedding model. Implementations must be deterministic.
pub trait EmbeddingBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn dimension(&self) -> usize;
    fn max_input_tokens(&self) -> usize;
    /// Embeds a batch. `BackendUnavailable` is treated as retryable.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbeddingError>;
}

/// Embeds `texts` with retries on transient failures, validating the output.
pub fn embed(backend: &dyn EmbeddingBackend, texts: &[&str], retry: &RetryPolicy) -> Result<Vec<Vector>, EmbeddingError> {
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(EmbeddingError::EmptyText(i));
    }
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let mut attempt = 1;
    let vectors = loop {
        match backend.embed_batch(texts) {
            Ok(v) => break v,
            Err(EmbeddingError::BackendUnavailable(msg)) if attempt < retry.attempts() => {
                log::warn!("embedding attempt {attempt} failed: {msg}; retrying");
                thread::sleep(retry.backoff(attempt));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    };
    if vectors.len() != texts.len() {
        return Err(EmbeddingError::CountMismatch {
            expected: texts.len(),
            got: vectors.len(),
        });
    }
    for v in &vectors {
        if v.dimension() != backend.dimension() {
            return Err(EmbeddingError::DimensionMismatch {
                left: v.dimension(),
                right: backend.dimension(),
            });
        }
        if v.0.iter().any(|x| !x.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
    }
    Ok(vectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        let v = Vector(vec![0.3, -1.2, 4.0]);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let x = Vector(vec![1.0, 0.0]);
        let y = Vector(vec![0.0, 1.0]);
        assert_eq!(cosine_similarity(&x, &y).unwrap(), 0.0);
        let d = Vector(vec![1.0, 1.0]);
        assert!((cosine_similarity(&d, &x).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-4);
    }

    #[test]
    fn cosine_errors() {
        let z = Vector(vec![0.0, 0.0]);
        let x = Vector(vec![1.0, 0.0]);
        assert!(matches!(cosine_similarity(&z, &x), Err(EmbeddingError::ZeroVector)));
        let long = Vector(vec![1.0, 0.0, 0.0]);
        let err = cosine_similarity(&long, &x).unwrap_err();
        assert_eq!(err.code(), "DIMENSION_MISMATCH");
    }

    #[test]
    fn cosine_is_symmetric_and_bounded() {
        use proptest::prelude::*;
        proptest!(|(a in proptest::collection::vec(-10f32..10.0, 4), b in proptest::collection::vec(-10f32..10.0, 4))| {
            let (a, b) = (Vector(a), Vector(b));
            if let (Ok(ab), Ok(ba)) = (cosine_similarity(&a, &b), cosine_similarity(&b, &a)) {
                prop_assert_eq!(ab, ba);
                prop_assert!((-1.0..=1.0).contains(&ab));
            }
        });
    }

    #[test]
    fn mean_pool_is_unit_length() {
        let pooled = Vector::mean_pool(&[Vector(vec![1.0, 0.0]), Vector(vec![0.0, 1.0])]).unwrap();
        assert!((pooled.norm() - 1.0).abs() < 1e-6);
        assert!((pooled.0[0] - pooled.0[1]).abs() < 1e-7);
        assert!(Vector::mean_pool(&[]).is_none());
    }

    struct Flaky {
        failures: std::sync::atomic::AtomicU32,
    }

    impl EmbeddingBackend for Flaky {
        fn backend_id(&self) -> &str {
            "flaky"
        }
        fn dimension(&self) -> usize {
            2
        }
        fn max_input_tokens(&self) -> usize {
            100
        }
        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbeddingError> {
            use std::sync::atomic::Ordering;
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(EmbeddingError::BackendUnavailable("503".into()));
            }
            Ok(texts.iter().map(|_| Vector(vec![1.0, 0.0])).collect())
        }
    }

    #[test]
    fn embed_retries_unavailable_backend() {
        let backend = Flaky {
            failures: 2.into(),
        };
        let out = embed(&backend, &["a", "b"], &RetryPolicy::immediate(3)).unwrap();
        assert_eq!(out.len(), 2);

        let backend = Flaky {
            failures: 5.into(),
        };
        let err = embed(&backend, &["a"], &RetryPolicy::immediate(3)).unwrap_err();
        assert_eq!(err.code(), "BACKEND_UNAVAILABLE");
        assert!(matches!(embed(&backend, &["a", " "], &RetryPolicy::immediate(1)), Err(EmbeddingError::EmptyText(1))));
    }
}
