//! Scoring predictions against labels, the prevalence baseline, and
//! strategy × k sweeps.

mod sweep;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::EligibilityProfile;
use crate::assessment::UsageTotals;
use crate::corpus::{CriterionSpec, Decision, GroundTruth};

pub use sweep::{run_sweep, Depth, SweepCell, SweepOptions, SweepReport, SweepRow};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("no labeled examples for criterion {0:?}")]
    EmptyLabels(String),
    #[error("no label for patient {patient_id:?}, criterion {criterion_id:?}")]
    MissingLabels { patient_id: String, criterion_id: String },
    #[error("no prediction for patient {patient_id:?}, criterion {criterion_id:?}")]
    MissingPrediction { patient_id: String, criterion_id: String },
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::EmptyLabels(_) => "EMPTY_LABELS",
            EvalError::MissingLabels { .. } => "MISSING_LABELS",
            EvalError::MissingPrediction { .. } => "MISSING_PREDICTION",
        }
    }
}

/// Counts with MET as the positive class.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub criterion_id: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F1 from counts; 0 when undefined.
fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    ratio(2 * tp, 2 * tp + fp + fn_)
}

impl ConfusionMatrix {
    pub fn new(criterion_id: impl Into<String>) -> Self {
        ConfusionMatrix {
            criterion_id: criterion_id.into(),
            ..Default::default()
        }
    }

    pub fn add(&mut self, predicted: Decision, label: Decision) {
        match (predicted.is_met(), label.is_met()) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1_met(&self) -> f64 {
        f1(self.tp, self.fp, self.fn_)
    }

    /// F1 with NOT MET as the positive class.
    pub fn f1_not_met(&self) -> f64 {
        f1(self.tn, self.fn_, self.fp)
    }
}

/// Mean of the MET and NOT MET F1 scores.
pub fn overall_f1(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    if cm.total() == 0 {
        return Err(EvalError::EmptyLabels(cm.criterion_id.clone()));
    }
    Ok((cm.f1_met() + cm.f1_not_met()) / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionScore {
    pub criterion_id: String,
    pub confusion: ConfusionMatrix,
    pub precision: f64,
    pub recall: f64,
    pub f1_met: f64,
    pub f1_not_met: f64,
    pub overall_f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub total_tokens: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub api_calls: u64,
    pub cost: f64,
}

impl From<UsageTotals> for Efficiency {
    fn from(t: UsageTotals) -> Self {
        Efficiency {
            total_tokens: t.tokens(),
            prompt_tokens: t.prompt_tokens,
            completion_tokens: t.completion_tokens,
            api_calls: t.api_calls,
            cost: t.cost,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_criterion: Vec<CriterionScore>,
    /// Pooled over all criteria, MET positive.
    pub precision: f64,
    pub recall: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub pooled: ConfusionMatrix,
    pub efficiency: Efficiency,
}

/// Scores profiles against labels. Macro-F1 averages per-criterion overall
/// F1; micro-F1 is the overall F1 of the confusion matrix pooled across
/// criteria.
pub fn score(
    predictions: &[EligibilityProfile],
    labels: &GroundTruth,
    criteria: &[CriterionSpec],
    usage: UsageTotals,
) -> Result<EvalReport, EvalError> {
    let mut matrices: Vec<ConfusionMatrix> = criteria.iter().map(|c| ConfusionMatrix::new(&c.criterion_id)).collect();
    for profile in predictions {
        for (cm, spec) in matrices.iter_mut().zip(criteria) {
            let id = &spec.criterion_id;
            let label = labels.get(&profile.patient_id, id).ok_or_else(|| EvalError::MissingLabels {
                patient_id: profile.patient_id.clone(),
                criterion_id: id.clone(),
            })?;
            let predicted = *profile.decisions.get(id).ok_or_else(|| EvalError::MissingPrediction {
                patient_id: profile.patient_id.clone(),
                criterion_id: id.clone(),
            })?;
            cm.add(predicted, label);
        }
    }

    let mut pooled = ConfusionMatrix::new("ALL");
    let mut per_criterion = Vec::with_capacity(matrices.len());
    for cm in matrices {
        pooled.merge(&cm);
        per_criterion.push(CriterionScore {
            criterion_id: cm.criterion_id.clone(),
            precision: cm.precision(),
            recall: cm.recall(),
            f1_met: cm.f1_met(),
            f1_not_met: cm.f1_not_met(),
            overall_f1: overall_f1(&cm)?,
            support: cm.total(),
            confusion: cm,
        });
    }
    if per_criterion.is_empty() {
        return Err(EvalError::EmptyLabels("ALL".into()));
    }
    let macro_f1 = per_criterion.iter().map(|s| s.overall_f1).sum::<f64>() / per_criterion.len() as f64;
    Ok(EvalReport {
        precision: pooled.precision(),
        recall: pooled.recall(),
        macro_f1,
        micro_f1: overall_f1(&pooled)?,
        per_criterion,
        pooled,
        efficiency: usage.into(),
    })
}

/// Predicts each criterion's majority class for every patient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrevalenceBaseline {
    pub majority: BTreeMap<String, Decision>,
}

/// Fits the baseline on training labels. A 50/50 split predicts MET.
pub fn prevalence_baseline(train: &GroundTruth, criteria: &[CriterionSpec]) -> Result<PrevalenceBaseline, EvalError> {
    let mut counts: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for (_, criterion, decision) in train.iter() {
        let entry = counts.entry(criterion).or_default();
        if decision.is_met() {
            entry.0 += 1;
        } else {
            entry.1 += 1;
        }
    }
    let mut majority = BTreeMap::new();
    for c in criteria {
        let (met, not_met) = counts.get(c.criterion_id.as_str()).copied().unwrap_or_default();
        if met + not_met == 0 {
            return Err(EvalError::EmptyLabels(c.criterion_id.clone()));
        }
        majority.insert(c.criterion_id.clone(), Decision::from_bool(met >= not_met));
    }
    Ok(PrevalenceBaseline { majority })
}

impl PrevalenceBaseline {
    /// Baseline from known MET rates rather than labels.
    pub fn from_prevalence(rates: &BTreeMap<String, f64>) -> Self {
        PrevalenceBaseline {
            majority: rates.iter().map(|(c, r)| (c.clone(), Decision::from_bool(*r >= 0.5))).collect(),
        }
    }

    pub fn predict<'a>(&self, patient_ids: impl IntoIterator<Item = &'a str>) -> Vec<EligibilityProfile> {
        patient_ids
            .into_iter()
            .map(|p| EligibilityProfile {
                patient_id: p.to_string(),
                decisions: self.majority.clone(),
                provenance: BTreeMap::new(),
                no_evidence: Vec::new(),
            })
            .collect()
    }
}
