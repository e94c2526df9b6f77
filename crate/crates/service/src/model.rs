use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use trialmatch_core::aggregation::{EligibilityProfile, ProvenanceEntry};
use trialmatch_core::assessment::{Confidence, UsageTotals};
use trialmatch_core::corpus::Decision;
use trialmatch_core::prompting::{SchemaConfig, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RunStatus {
    Pending,
    Running,
    Done,
    Failed,
}

/// Everything that determines what a run computes. Fixed at creation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub strategy: Strategy,
    /// Retrieval depth; absent means full notes.
    pub k: Option<usize>,
    /// Backend spec as requested: `oracle` or `remote:<base url>`.
    pub backend: String,
    pub backend_id: String,
    pub model: Option<String>,
    pub schema: SchemaConfig,
    pub max_in_flight: usize,
    pub criteria_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRun {
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
    pub status: RunStatus,
    pub config: RunSettings,
    pub created_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger: Option<UsageTotals>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_failures: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorSummary>,
    /// Present iff the run is DONE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub results: Option<Arc<Vec<EligibilityProfile>>>,
}

impl MatchRun {
    /// The run without its results, for listings.
    pub fn summary(&self) -> MatchRun {
        MatchRun {
            results: None,
            ..self.clone()
        }
    }
}

/// One (patient, criterion) decision as served to reviewers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRow {
    pub patient_id: String,
    pub criterion_id: String,
    pub decision: Decision,
    /// Taken from the most recent note-level answer agreeing with the
    /// aggregated decision.
    pub rationale: Option<String>,
    pub confidence: Option<Confidence>,
    /// NOT MET only because nothing was assessed for this criterion.
    pub no_evidence: bool,
    pub provenance: Vec<ProvenanceEntry>,
}

impl DecisionRow {
    pub fn from_profile(profile: &EligibilityProfile) -> Vec<DecisionRow> {
        profile
            .decisions
            .iter()
            .map(|(criterion_id, &decision)| {
                let provenance = profile.provenance.get(criterion_id).cloned().unwrap_or_default();
                // Undated entries saw every note, so they rank as most recent.
                let support = provenance
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| p.decision == decision)
                    .max_by_key(|(i, p)| (p.note_date.is_none(), p.note_date, *i))
                    .map(|(_, p)| p);
                DecisionRow {
                    patient_id: profile.patient_id.clone(),
                    criterion_id: criterion_id.clone(),
                    decision,
                    rationale: support.and_then(|p| p.rationale.clone()),
                    confidence: support.and_then(|p| p.confidence),
                    no_evidence: profile.no_evidence.contains(criterion_id),
                    provenance,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Correct,
    PartiallyCorrect,
    Incorrect,
}

impl Verdict {
    pub const ALL: [Verdict; 3] = [Verdict::Correct, Verdict::PartiallyCorrect, Verdict::Incorrect];

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Correct => "CORRECT",
            Verdict::PartiallyCorrect => "PARTIALLY_CORRECT",
            Verdict::Incorrect => "INCORRECT",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verdict {
    type Err = String;

    /// Accepts `CORRECT`, `Partially Correct`, `partially-correct`, ...
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c.to_ascii_uppercase() })
            .collect();
        match norm.as_str() {
            "CORRECT" => Ok(Verdict::Correct),
            "PARTIALLY_CORRECT" => Ok(Verdict::PartiallyCorrect),
            "INCORRECT" => Ok(Verdict::Incorrect),
            _ => Err(format!(
                "unknown verdict {s:?}; expected CORRECT, PARTIALLY_CORRECT or INCORRECT"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewVerdict {
    pub review_id: String,
    pub run_id: String,
    pub patient_id: String,
    pub criterion_id: String,
    pub verdict: Verdict,
    pub reviewer_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub created_at: String,
}

/// Verdict counts with all three keys always present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally(pub BTreeMap<Verdict, u64>);

impl Default for Tally {
    fn default() -> Self {
        Tally(Verdict::ALL.iter().map(|v| (*v, 0)).collect())
    }
}

impl Tally {
    pub fn add(&mut self, v: Verdict) {
        *self.0.entry(v).or_default() += 1;
    }

    pub fn get(&self, v: Verdict) -> u64 {
        self.0.get(&v).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewerTally {
    pub counts: Tally,
    pub per_criterion: BTreeMap<String, Tally>,
}

/// Counts use each reviewer's latest verdict per decision; `history_rows`
/// counts every stored row including superseded ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSummary {
    pub run_id: String,
    pub history_rows: u64,
    pub reviewed_decisions: u64,
    pub counts: Tally,
    pub per_criterion: BTreeMap<String, Tally>,
    pub per_reviewer: BTreeMap<String, ReviewerTally>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    #[test]
    fn verdict_spellings() {
        assert_eq!("Partially Correct".parse::<Verdict>().unwrap(), Verdict::PartiallyCorrect);
        assert_eq!("incorrect".parse::<Verdict>().unwrap(), Verdict::Incorrect);
        assert!("MAYBE".parse::<Verdict>().is_err());
        assert_eq!(serde_json::to_string(&Verdict::PartiallyCorrect).unwrap(), "\"PARTIALLY_CORRECT\"");
        let t = Tally::default();
        assert_eq!(
            serde_json::to_string(&t).unwrap(),
            r#"{"CORRECT":0,"PARTIALLY_CORRECT":0,"INCORRECT":0}"#
        );
    }

    #[test]
    fn rationale_comes_from_latest_agreeing_entry() {
        let entry = |day: u32, decision, rationale: &str| ProvenanceEntry {
            job_id: format!("j{day}"),
            note_id: Some(format!("n{day}")),
            note_date: Some(NaiveDate::from_ymd_opt(2024, 1, day).unwrap()),
            decision,
            rationale: Some(rationale.into()),
            confidence: None,
            error: None,
        };
        let profile = EligibilityProfile {
            patient_id: "p".into(),
            decisions: [("C".to_string(), Decision::Met)].into(),
            provenance: [(
                "C".to_string(),
                vec![entry(1, Decision::Met, "old"), entry(2, Decision::Met, "new"), entry(3, Decision::NotMet, "no")],
            )]
            .into(),
            no_evidence: vec![],
        };
        let rows = DecisionRow::from_profile(&profile);
        assert_eq!(rows[0].rationale.as_deref(), Some("new"));
        assert_eq!(rows[0].provenance.len(), 3);
    }
}
