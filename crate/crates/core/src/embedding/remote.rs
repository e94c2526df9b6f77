use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{EmbeddingBackend, EmbeddingError, Vector};

/// Environment variable holding the bearer token for remote embedding APIs.
pub const EMBEDDING_API_KEY_ENV: &str = "TRIALMATCH_EMBEDDING_API_KEY";

/// OpenAI-compatible `/embeddings` client.
///
/// Sends `{"model": ..., "input": [texts]}` and accepts either
/// `{"data": [{"embedding": [...]}, ...]}` or `{"embeddings": [[...], ...]}`.
pub struct RemoteEmbedder {
    url: String,
    model: Option<String>,
    id: String,
    dimension: usize,
    max_input_tokens: usize,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct DataItem {
    embedding: Vec<f32>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    #[serde(default)]
    data: Option<Vec<DataItem>>,
    #[serde(default)]
    embeddings: Option<Vec<Vec<f32>>>,
}

impl RemoteEmbedder {
    /// Connects and probes the endpoint once to learn the vector dimension.
    pub fn connect(url: impl Into<String>, model: Option<String>, max_input_tokens: usize) -> Result<Self, EmbeddingError> {
        let url = url.into();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| EmbeddingError::BackendUnavailable(e.to_string()))?;
        let mut embedder = RemoteEmbedder {
            id: format!("remote:{url}"),
            url,
            model,
            dimension: 0,
            max_input_tokens,
            api_key: std::env::var(EMBEDDING_API_KEY_ENV).ok(),
            client,
        };
        let probe = embedder.request(&["dimension probe"])?;
        embedder.dimension = probe
            .first()
            .map(Vector::dimension)
            .filter(|&d| d > 0)
            .ok_or_else(|| EmbeddingError::BackendRejected("probe returned no vector".into()))?;
        Ok(embedder)
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbeddingError> {
        let mut body = json!({ "input": texts });
        if let Some(model) = &self.model {
            body["model"] = json!(model);
        }
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| EmbeddingError::BackendUnavailable(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(EmbeddingError::BackendUnavailable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let detail = resp.text().unwrap_or_default();
            return Err(EmbeddingError::BackendRejected(format!("HTTP {status}: {detail}")));
        }
        let parsed: EmbeddingResponse = resp
            .json()
            .map_err(|e| EmbeddingError::BackendRejected(format!("bad response body: {e}")))?;
        let vectors = match (parsed.data, parsed.embeddings) {
            (Some(data), _) => data.into_iter().map(|d| Vector(d.embedding)).collect(),
            (None, Some(raw)) => raw.into_iter().map(Vector).collect(),
            (None, None) => return Err(EmbeddingError::BackendRejected("response has no embeddings".into())),
        };
        Ok(vectors)
    }
}

impl EmbeddingBackend for RemoteEmbedder {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn max_input_tokens(&self) -> usize {
        self.max_input_tokens
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbeddingError> {
        self.request(texts)
    }
}
