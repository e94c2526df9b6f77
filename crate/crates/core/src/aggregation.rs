//! Collapsing per-note decisions into one patient-level decision per
//! criterion.

use std::collections::BTreeMap;

use chrono::{Months, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assessment::{Confidence, CriterionDecision};
use crate::corpus::{Aggregation, Corpus, CriterionSpec, Decision, Patient};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AggregationError {
    #[error("decision from job {job_id} names unknown criterion {criterion_id:?}")]
    UnknownCriterion { job_id: String, criterion_id: String },
    #[error("decision from job {job_id} belongs to patient {found:?}, not {expected:?}")]
    PatientMismatch { job_id: String, expected: String, found: String },
}

impl AggregationError {
    pub fn code(&self) -> &'static str {
        match self {
            AggregationError::UnknownCriterion { .. } => "UNKNOWN_CRITERION",
            AggregationError::PatientMismatch { .. } => "PATIENT_MISMATCH",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    Max,
    Min,
    MostRecent { window_months: u32 },
}

impl Policy {
    pub fn of(spec: &CriterionSpec) -> Policy {
        match spec.aggregation {
            Aggregation::Max => Policy::Max,
            Aggregation::Min => Policy::Min,
            Aggregation::MostRecent => Policy::MostRecent {
                window_months: spec.window_months.unwrap_or(0),
            },
        }
    }
}

/// Exclusive lower bound of a month window ending at `reference`. Calendar
/// months; the day is clamped when the target month is shorter.
pub fn window_start(reference: NaiveDate, months: u32) -> NaiveDate {
    reference.checked_sub_months(Months::new(months)).unwrap_or(NaiveDate::MIN)
}

/// Applies a policy to dated decisions. Empty input is NOT MET.
///
/// MOST_RECENT takes the latest note dated in `(reference - window, reference]`;
/// several notes on that day are combined with MAX.
pub fn aggregate_criterion(decisions: &[(NaiveDate, Decision)], policy: Policy, reference: NaiveDate) -> Decision {
    if decisions.is_empty() {
        return Decision::NotMet;
    }
    match policy {
        Policy::Max => Decision::from_bool(decisions.iter().any(|(_, d)| d.is_met())),
        Policy::Min => Decision::from_bool(decisions.iter().all(|(_, d)| d.is_met())),
        Policy::MostRecent { window_months } => {
            let start = window_start(reference, window_months);
            let in_window = decisions.iter().filter(|(date, _)| *date > start && *date <= reference);
            let latest = in_window.clone().map(|(date, _)| *date).max();
            match latest {
                None => Decision::NotMet,
                Some(day) => Decision::from_bool(in_window.filter(|(d, _)| *d == day).any(|(_, d)| d.is_met())),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub job_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note_date: Option<NaiveDate>,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<Confidence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl From<&CriterionDecision> for ProvenanceEntry {
    fn from(d: &CriterionDecision) -> Self {
        ProvenanceEntry {
            job_id: d.job_id.clone(),
            note_id: d.note_id.clone(),
            note_date: d.note_date,
            decision: d.decision,
            rationale: d.rationale.clone(),
            confidence: d.confidence,
            error: d.error.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibilityProfile {
    pub patient_id: String,
    pub decisions: BTreeMap<String, Decision>,
    pub provenance: BTreeMap<String, Vec<ProvenanceEntry>>,
    /// Criteria decided NOT MET only because no decision was available.
    #[serde(default)]
    pub no_evidence: Vec<String>,
}

/// Aggregates one patient's decisions. Decisions without a note date (from
/// strategies that see all notes at once) count as dated on the reference
/// date, so a single such decision passes through unchanged.
pub fn aggregate_patient(
    per_note: &[CriterionDecision],
    criteria: &[CriterionSpec],
    patient: &Patient,
) -> Result<EligibilityProfile, AggregationError> {
    let reference = patient.reference_date();
    let mut grouped: BTreeMap<&str, Vec<&CriterionDecision>> =
        criteria.iter().map(|c| (c.criterion_id.as_str(), Vec::new())).collect();
    for d in per_note {
        if d.patient_id != patient.patient_id {
            return Err(AggregationError::PatientMismatch {
                job_id: d.job_id.clone(),
                expected: patient.patient_id.clone(),
                found: d.patient_id.clone(),
            });
        }
        match grouped.get_mut(d.criterion_id.as_str()) {
            Some(list) => list.push(d),
            None => {
                return Err(AggregationError::UnknownCriterion {
                    job_id: d.job_id.clone(),
                    criterion_id: d.criterion_id.clone(),
                })
            }
        }
    }

    let mut profile = EligibilityProfile {
        patient_id: patient.patient_id.clone(),
        decisions: BTreeMap::new(),
        provenance: BTreeMap::new(),
        no_evidence: Vec::new(),
    };
    for spec in criteria {
        let mut list = grouped.remove(spec.criterion_id.as_str()).unwrap_or_default();
        list.sort_by(|a, b| (a.note_date, &a.note_id, &a.job_id).cmp(&(b.note_date, &b.note_id, &b.job_id)));
        let dated: Vec<(NaiveDate, Decision)> = list.iter().map(|d| (d.note_date.unwrap_or(reference), d.decision)).collect();
        if dated.is_empty() {
            profile.no_evidence.push(spec.criterion_id.clone());
        }
        profile
            .decisions
            .insert(spec.criterion_id.clone(), aggregate_criterion(&dated, Policy::of(spec), reference));
        profile
            .provenance
            .insert(spec.criterion_id.clone(), list.into_iter().map(ProvenanceEntry::from).collect());
    }
    Ok(profile)
}

/// Aggregates decisions for every patient in the corpus, in corpus order.
pub fn aggregate_all(
    decisions: &[CriterionDecision],
    criteria: &[CriterionSpec],
    corpus: &Corpus,
) -> Result<Vec<EligibilityProfile>, AggregationError> {
    let mut by_patient: BTreeMap<&str, Vec<CriterionDecision>> = BTreeMap::new();
    for d in decisions {
        by_patient.entry(d.patient_id.as_str()).or_default().push(d.clone());
    }
    corpus
        .patients()
        .iter()
        .map(|p| aggregate_patient(by_patient.get(p.patient_id.as_str()).map_or(&[][..], Vec::as_slice), criteria, p))
        .collect()
}
