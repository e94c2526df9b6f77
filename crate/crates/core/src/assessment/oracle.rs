use std::collections::BTreeMap;

use serde_json::json;

use super::{AssessmentBackend, AssessmentRequest, BackendError, Completion, Pricing};
use crate::corpus::{met_sentinel, not_met_sentinel, Aggregation, CriterionSpec};
use crate::tokenize::{TokenCounter, WhitespaceTokenCounter};

pub const ORACLE_BACKEND_ID: &str = "oracle";

/// Deterministic stand-in for a language model on synthetic corpora.
///
/// A criterion is MET when its sentinel appears in the prompt. Criteria
/// aggregated with MIN are planted inversely: they are MET unless the
/// NOTMET sentinel appears.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    inverted: BTreeMap<String, bool>,
    context_limit: usize,
    pricing: Pricing,
}

impl OracleBackend {
    pub fn new(criteria: &[CriterionSpec]) -> Self {
        OracleBackend {
            inverted: criteria
                .iter()
                .map(|c| (c.criterion_id.clone(), c.aggregation == Aggregation::Min))
                .collect(),
            context_limit: 1_000_000,
            pricing: Pricing::default(),
        }
    }

    pub fn with_context_limit(mut self, limit: usize) -> Self {
        self.context_limit = limit;
        self
    }

    pub fn with_pricing(mut self, pricing: Pricing) -> Self {
        self.pricing = pricing;
        self
    }

    /// The answer for a prompt: a JSON array in request order.
    pub fn answer(&self, prompt: &str, criteria_ids: &[String]) -> String {
        let items: Vec<_> = criteria_ids
            .iter()
            .map(|id| {
                let inverted = self.inverted.get(id).copied().unwrap_or(false);
                let (found, met) = if inverted {
                    let found = prompt.contains(&not_met_sentinel(id));
                    (found, !found)
                } else {
                    let found = prompt.contains(&met_sentinel(id));
                    (found, found)
                };
                json!({
                    "criterion": id,
                    "medications": [],
                    "rationale": if found { "sentinel found" } else { "sentinel absent" },
                    "decision": if met { "MET" } else { "NOT MET" },
                    "confidence": "High",
                })
            })
            .collect();
        serde_json::to_string(&items).expect("serializable")
    }
}

impl AssessmentBackend for OracleBackend {
    fn backend_id(&self) -> &str {
        ORACLE_BACKEND_ID
    }

    fn context_limit(&self) -> usize {
        self.context_limit
    }

    fn pricing(&self) -> Pricing {
        self.pricing
    }

    fn complete(&self, request: &AssessmentRequest) -> Result<Completion, BackendError> {
        let prompt = request.messages.first().map_or("", |m| m.content.as_str());
        let text = self.answer(prompt, &request.criteria_ids);
        let prompt_tokens: usize = request.messages.iter().map(|m| WhitespaceTokenCounter.count(&m.content)).sum();
        Ok(Completion {
            completion_tokens: WhitespaceTokenCounter.count(&text) as u64,
            prompt_tokens: prompt_tokens as u64,
            text,
        })
    }
}
