//! Flat file formats written and read by the CLI.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use trialmatch_core::aggregation::EligibilityProfile;
use trialmatch_core::assessment::{CriterionDecision, JobUsage, UsageTotals};
use trialmatch_core::corpus::Decision;

/// One per-job decision, as exchanged between `match` and `aggregate`.
/// Medications are joined with `"; "`.
#[derive(Debug, Serialize, Deserialize)]
struct DecisionRow {
    job_id: String,
    patient_id: String,
    criterion_id: String,
    note_id: Option<String>,
    note_date: Option<chrono::NaiveDate>,
    decision: Decision,
    medications: Option<String>,
    rationale: Option<String>,
    confidence: Option<String>,
    error: Option<String>,
}

pub fn write_decisions(path: &Path, decisions: &[CriterionDecision]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for d in decisions {
        w.serialize(DecisionRow {
            job_id: d.job_id.clone(),
            patient_id: d.patient_id.clone(),
            criterion_id: d.criterion_id.clone(),
            note_id: d.note_id.clone(),
            note_date: d.note_date,
            decision: d.decision,
            medications: d.medications.as_ref().map(|m| m.join("; ")),
            rationale: d.rationale.clone(),
            confidence: d.confidence.map(|c| c.to_string()),
            error: d.error.clone(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_decisions(path: &Path) -> Result<Vec<CriterionDecision>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<DecisionRow>().enumerate() {
        let row = row.with_context(|| format!("{} record {}", path.display(), i + 1))?;
        let confidence = match row.confidence.as_deref() {
            None | Some("") => None,
            Some(c) => Some(c.parse().map_err(anyhow::Error::msg).with_context(|| format!("{} record {}", path.display(), i + 1))?),
        };
        out.push(CriterionDecision {
            job_id: row.job_id,
            patient_id: row.patient_id,
            criterion_id: row.criterion_id,
            note_id: row.note_id.filter(|s| !s.is_empty()),
            note_date: row.note_date,
            decision: row.decision,
            medications: row
                .medications
                .map(|m| m.split("; ").filter(|s| !s.is_empty()).map(str::to_string).collect()),
            rationale: row.rationale.filter(|s| !s.is_empty()),
            confidence,
            error: row.error.filter(|s| !s.is_empty()),
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    patient_id: String,
    criterion_id: String,
    decision: Decision,
    no_evidence: bool,
}

/// Patient-level decisions, one row per (patient, criterion).
pub fn write_predictions(path: &Path, profiles: &[EligibilityProfile]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for p in profiles {
        for (criterion_id, &decision) in &p.decisions {
            w.serialize(PredictionRow {
                patient_id: p.patient_id.clone(),
                criterion_id: criterion_id.clone(),
                decision,
                no_evidence: p.no_evidence.contains(criterion_id),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads predictions from a predictions CSV or a profiles JSONL file
/// (chosen by extension). CSV rows carry no provenance.
pub fn read_predictions(path: &Path) -> Result<Vec<EligibilityProfile>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        return read_jsonl(path);
    }
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut profiles: BTreeMap<String, EligibilityProfile> = BTreeMap::new();
    for (i, row) in r.deserialize::<PredictionRow>().enumerate() {
        let row = row.with_context(|| format!("{} record {}", path.display(), i + 1))?;
        let p = profiles.entry(row.patient_id.clone()).or_insert_with(|| EligibilityProfile {
            patient_id: row.patient_id.clone(),
            decisions: BTreeMap::new(),
            provenance: BTreeMap::new(),
            no_evidence: Vec::new(),
        });
        if p.decisions.insert(row.criterion_id.clone(), row.decision).is_some() {
            bail!("{}: duplicate prediction for {} {}", path.display(), row.patient_id, row.criterion_id);
        }
        if row.no_evidence {
            p.no_evidence.push(row.criterion_id);
        }
    }
    Ok(profiles.into_values().collect())
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?);
    }
    Ok(out)
}

/// Sums a per-job usage CSV as written by `match`.
pub fn read_usage(path: &Path) -> Result<UsageTotals> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut totals = UsageTotals::default();
    for (i, job) in r.deserialize::<JobUsage>().enumerate() {
        let job = job.with_context(|| format!("{} record {}", path.display(), i + 1))?;
        totals.prompt_tokens += job.prompt_tokens;
        totals.completion_tokens += job.completion_tokens;
        totals.api_calls += u64::from(job.attempts);
        totals.cost += job.cost;
    }
    Ok(totals)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
