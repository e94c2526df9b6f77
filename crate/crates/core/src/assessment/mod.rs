//! Sending prompts to an assessment model, parsing its answers, and
//! accounting for every call.

mod ledger;
mod oracle;
mod parse;
mod remote;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Decision;
use crate::prompting::{PromptJob, SchemaConfig};
use crate::retry::RetryPolicy;

pub use ledger::{AttemptOutcome, JobUsage, LedgerRow, UsageLedger, UsageTotals};
pub use oracle::{OracleBackend, ORACLE_BACKEND_ID};
pub use parse::{parse_response, ParseError, ParseErrorKind, ParsedAnswer};
pub use remote::{RemoteChatBackend, API_KEY_ENV};
pub use scripted::{Scripted, ScriptedBackend};

/// Output cap: room for thirteen answer objects with a short rationale.
pub const DEFAULT_MAX_OUTPUT_TOKENS: usize = 2048;

const REPAIR_REMINDER: &str =
    "Your previous reply could not be read as JSON. Reply again with only the JSON array described above and no other text.";

/// Prices per 1000 tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Pricing {
    pub input_per_1k: f64,
    pub output_per_1k: f64,
}

impl Pricing {
    pub fn cost(&self, prompt_tokens: u64, completion_tokens: u64) -> f64 {
        (prompt_tokens as f64 * self.input_per_1k + completion_tokens as f64 * self.output_per_1k) / 1000.0
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.input_per_1k) && ok(self.output_per_1k) {
            Ok(())
        } else {
            Err(format!("prices must be non-negative, got {self:?}"))
        }
    }
}

/// Pricing keyed by backend id, loaded from a JSON object such as
/// `{"remote:https://api.example.com/v1": {"input_per_1k": 0.01, "output_per_1k": 0.03}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceSheet(pub BTreeMap<String, Pricing>);

impl PriceSheet {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let sheet: PriceSheet = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        for (id, p) in &sheet.0 {
            p.validate().map_err(|e| format!("{id}: {e}"))?;
        }
        Ok(sheet)
    }

    /// Price for a backend; unknown backends are free.
    pub fn get(&self, backend_id: &str) -> Pricing {
        self.0.get(backend_id).copied().unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Confidence {
    Low,
    Medium,
    High,
}

impl FromStr for Confidence {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Ok(Confidence::Low),
            "medium" => Ok(Confidence::Medium),
            "high" => Ok(Confidence::High),
            _ => Err(format!("unknown confidence {s:?}")),
        }
    }
}

impl fmt::Display for Confidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Confidence::Low => "Low",
            Confidence::Medium => "Medium",
            Confidence::High => "High",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssessmentRequest {
    pub job_id: String,
    pub messages: Vec<ChatMessage>,
    pub criteria_ids: Vec<String>,
    pub max_output_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Transport failures and rate limits; retried.
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("backend failure: {0}")]
    Fatal(String),
}

/// A model that answers prompts.
pub trait AssessmentBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn context_limit(&self) -> usize;
    fn pricing(&self) -> Pricing;
    fn complete(&self, request: &AssessmentRequest) -> Result<Completion, BackendError>;
}

impl<T: AssessmentBackend + ?Sized> AssessmentBackend for Box<T> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }
    fn context_limit(&self) -> usize {
        (**self).context_limit()
    }
    fn pricing(&self) -> Pricing {
        (**self).pricing()
    }
    fn complete(&self, request: &AssessmentRequest) -> Result<Completion, BackendError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawResponse {
    pub job_id: String,
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    /// Attempt number of the successful call, 1-based.
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssessConfig {
    pub retry: RetryPolicy,
    pub max_output_tokens: usize,
    /// Ask once more when the answer is not JSON.
    pub repair_invalid_json: bool,
}

impl Default for AssessConfig {
    fn default() -> Self {
        AssessConfig {
            retry: RetryPolicy::default(),
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            repair_invalid_json: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AssessmentError {
    #[error("job {job_id} needs {needed} tokens (prompt plus output cap) but the backend accepts {limit}")]
    ContextExceeded { job_id: String, needed: usize, limit: usize },
    #[error("job {job_id} failed after {attempts} attempt(s): {message}")]
    Backend { job_id: String, attempts: u32, message: String },
}

impl AssessmentError {
    pub fn code(&self) -> &'static str {
        match self {
            AssessmentError::ContextExceeded { .. } => "CONTEXT_EXCEEDED",
            AssessmentError::Backend { .. } => "BACKEND_ERROR",
        }
    }
}

/// Sends one job, retrying transient failures per the policy. Every call is
/// recorded in the ledger; attempt numbers continue from `first_attempt`.
fn call(
    backend: &dyn AssessmentBackend,
    job: &PromptJob,
    messages: Vec<ChatMessage>,
    first_attempt: u32,
    config: &AssessConfig,
    ledger: &UsageLedger,
) -> Result<RawResponse, AssessmentError> {
    let request = AssessmentRequest {
        job_id: job.job_id.clone(),
        messages,
        criteria_ids: job.criteria_ids.clone(),
        max_output_tokens: config.max_output_tokens,
    };
    let pricing = backend.pricing();
    let row = |attempt, pt, ct, outcome| {
        LedgerRow::priced(&job.job_id, &job.patient_id, job.strategy, attempt, pt, ct, pricing, outcome)
    };
    let max = config.retry.attempts();
    let mut tries = 0;
    loop {
        tries += 1;
        let attempt = first_attempt + tries - 1;
        let started = Instant::now();
        match backend.complete(&request) {
            Ok(c) => {
                ledger.record(row(attempt, c.prompt_tokens, c.completion_tokens, AttemptOutcome::Ok));
                return Ok(RawResponse {
                    job_id: job.job_id.clone(),
                    text: c.text,
                    prompt_tokens: c.prompt_tokens,
                    completion_tokens: c.completion_tokens,
                    latency_ms: started.elapsed().as_millis() as u64,
                    attempt,
                });
            }
            Err(BackendError::Transient(msg)) => {
                ledger.record(row(attempt, 0, 0, AttemptOutcome::Transient));
                if tries >= max {
                    return Err(AssessmentError::Backend {
                        job_id: job.job_id.clone(),
                        attempts: tries,
                        message: msg,
                    });
                }
                log::warn!("job {}: attempt {attempt} failed ({msg}); retrying", job.job_id);
                std::thread::sleep(config.retry.backoff(tries));
            }
            Err(BackendError::Fatal(msg)) => {
                ledger.record(row(attempt, 0, 0, AttemptOutcome::Fatal));
                return Err(AssessmentError::Backend {
                    job_id: job.job_id.clone(),
                    attempts: tries,
                    message: msg,
                });
            }
        }
    }
}

fn check_context(backend: &dyn AssessmentBackend, job: &PromptJob, config: &AssessConfig) -> Result<(), AssessmentError> {
    let needed = job.prompt_token_count + config.max_output_tokens;
    if needed > backend.context_limit() {
        return Err(AssessmentError::ContextExceeded {
            job_id: job.job_id.clone(),
            needed,
            limit: backend.context_limit(),
        });
    }
    Ok(())
}

/// Obtains the model's raw answer for a job.
pub fn assess(
    backend: &dyn AssessmentBackend,
    job: &PromptJob,
    config: &AssessConfig,
    ledger: &UsageLedger,
) -> Result<RawResponse, AssessmentError> {
    check_context(backend, job, config)?;
    call(backend, job, vec![ChatMessage::user(&job.rendered_text)], 1, config, ledger)
}

/// A parsed decision for one (patient, criterion) pair from one job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionDecision {
    pub job_id: String,
    pub patient_id: String,
    pub criterion_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note_id: Option<String>,
    /// Present for per-note strategies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note_date: Option<NaiveDate>,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub medications: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<Confidence>,
    /// Parse error code when the decision is a default rather than an answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobOutcome {
    pub response: RawResponse,
    pub decisions: Vec<CriterionDecision>,
    pub parse_error: Option<ParseError>,
}

/// Turns a job's answer into decisions. An unreadable answer yields NOT MET
/// for every requested criterion, flagged with the error code.
pub fn decisions_for(job: &PromptJob, text: &str, schema: &SchemaConfig) -> (Vec<CriterionDecision>, Option<ParseError>) {
    let base = |criterion_id: &str| CriterionDecision {
        job_id: job.job_id.clone(),
        patient_id: job.patient_id.clone(),
        criterion_id: criterion_id.to_string(),
        note_id: job.note_id().map(str::to_string),
        note_date: job.note_date(),
        decision: Decision::NotMet,
        medications: None,
        rationale: None,
        confidence: None,
        error: None,
    };
    match parse_response(&job.job_id, text, schema, &job.criteria_ids) {
        Ok(answers) => (
            answers
                .into_iter()
                .map(|a| CriterionDecision {
                    decision: a.decision,
                    medications: a.medications,
                    rationale: a.rationale,
                    confidence: a.confidence,
                    ..base(&a.criterion_id)
                })
                .collect(),
            None,
        ),
        Err(e) => {
            log::warn!("{e}; defaulting to NOT MET");
            let decisions = job
                .criteria_ids
                .iter()
                .map(|id| CriterionDecision {
                    error: Some(e.code().to_string()),
                    ..base(id)
                })
                .collect();
            (decisions, Some(e))
        }
    }
}

/// Assesses a job and parses the answer, with one repair request when the
/// answer is not JSON (if enabled).
pub fn assess_job(
    backend: &dyn AssessmentBackend,
    job: &PromptJob,
    schema: &SchemaConfig,
    config: &AssessConfig,
    ledger: &UsageLedger,
) -> Result<JobOutcome, AssessmentError> {
    let mut response = assess(backend, job, config, ledger)?;
    let (mut decisions, mut parse_error) = decisions_for(job, &response.text, schema);
    let invalid_json = matches!(&parse_error, Some(e) if e.kind == ParseErrorKind::InvalidJson);
    if invalid_json && config.repair_invalid_json {
        let messages = vec![
            ChatMessage::user(&job.rendered_text),
            ChatMessage::assistant(&response.text),
            ChatMessage::user(REPAIR_REMINDER),
        ];
        response = call(backend, job, messages, response.attempt + 1, config, ledger)?;
        (decisions, parse_error) = decisions_for(job, &response.text, schema);
    }
    Ok(JobOutcome {
        response,
        decisions,
        parse_error,
    })
}
