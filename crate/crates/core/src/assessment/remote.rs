use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{AssessmentBackend, AssessmentRequest, BackendError, Completion, Pricing};
use crate::tokenize::{TokenCounter, WhitespaceTokenCounter};

/// Environment variable holding the bearer token for the chat endpoint.
pub const API_KEY_ENV: &str = "TRIALMATCH_API_KEY";

/// OpenAI-compatible chat-completion client. Requests are sent with
/// temperature 0.
pub struct RemoteChatBackend {
    id: String,
    endpoint: String,
    model: String,
    context_limit: usize,
    pricing: Pricing,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl RemoteChatBackend {
    /// `base_url` is the API root; requests go to `{base_url}/chat/completions`.
    pub fn new(base_url: &str, model: impl Into<String>, context_limit: usize, pricing: Pricing) -> Result<Self, BackendError> {
        let base = base_url.trim_end_matches('/');
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| BackendError::Fatal(e.to_string()))?;
        Ok(RemoteChatBackend {
            id: format!("remote:{base}"),
            endpoint: format!("{base}/chat/completions"),
            model: model.into(),
            context_limit,
            pricing,
            api_key: std::env::var(API_KEY_ENV).ok(),
            client,
        })
    }
}

impl AssessmentBackend for RemoteChatBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn context_limit(&self) -> usize {
        self.context_limit
    }

    fn pricing(&self) -> Pricing {
        self.pricing
    }

    fn complete(&self, request: &AssessmentRequest) -> Result<Completion, BackendError> {
        let messages: Vec<_> = request
            .messages
            .iter()
            .map(|m| json!({"role": m.role, "content": m.content}))
            .collect();
        let body = json!({
            "model": self.model,
            "messages": messages,
            "max_tokens": request.max_output_tokens,
            "temperature": 0,
        });
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let detail = resp.text().unwrap_or_default();
            return Err(BackendError::Fatal(format!("HTTP {status}: {detail}")));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| BackendError::Fatal(format!("malformed completion body: {e}")))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        // Fall back to local counts when the server reports no usage.
        let (prompt_tokens, completion_tokens) = match parsed.usage {
            Some(u) => (u.prompt_tokens, u.completion_tokens),
            None => (
                request.messages.iter().map(|m| WhitespaceTokenCounter.count(&m.content) as u64).sum(),
                WhitespaceTokenCounter.count(&text) as u64,
            ),
        };
        Ok(Completion {
            text,
            prompt_tokens,
            completion_tokens,
        })
    }
}
