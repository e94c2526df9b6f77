use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::Pricing;
use crate::prompting::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptOutcome {
    Ok,
    Transient,
    Fatal,
}

/// One backend call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub job_id: String,
    pub patient_id: String,
    pub strategy: Strategy,
    pub attempt: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost: f64,
    pub outcome: AttemptOutcome,
}

impl LedgerRow {
    pub fn priced(
        job_id: &str,
        patient_id: &str,
        strategy: Strategy,
        attempt: u32,
        prompt_tokens: u64,
        completion_tokens: u64,
        pricing: Pricing,
        outcome: AttemptOutcome,
    ) -> Self {
        LedgerRow {
            job_id: job_id.to_string(),
            patient_id: patient_id.to_string(),
            strategy,
            attempt,
            prompt_tokens,
            completion_tokens,
            cost: pricing.cost(prompt_tokens, completion_tokens),
            outcome,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub api_calls: u64,
    pub cost: f64,
}

impl UsageTotals {
    pub fn tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

/// Per-job roll-up, the unit of the CSV export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobUsage {
    pub job_id: String,
    pub patient_id: String,
    pub strategy: Strategy,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub attempts: u32,
    pub cost: f64,
}

/// Append-only record of every backend call. Safe to share across worker
/// threads; appends are serialized by an internal lock.
#[derive(Debug, Default)]
pub struct UsageLedger {
    rows: Mutex<Vec<LedgerRow>>,
}

impl Clone for UsageLedger {
    fn clone(&self) -> Self {
        UsageLedger::from_rows(self.rows())
    }
}

impl PartialEq for UsageLedger {
    fn eq(&self, other: &Self) -> bool {
        self.rows() == other.rows()
    }
}

impl UsageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<LedgerRow>) -> Self {
        UsageLedger { rows: Mutex::new(rows) }
    }

    pub fn record(&self, row: LedgerRow) {
        self.rows.lock().expect("ledger lock poisoned").push(row);
    }

    /// Rows ordered by job id and attempt, independent of completion order.
    pub fn rows(&self) -> Vec<LedgerRow> {
        let mut rows = self.rows.lock().expect("ledger lock poisoned").clone();
        rows.sort_by(|a, b| (&a.job_id, a.attempt).cmp(&(&b.job_id, b.attempt)));
        rows
    }

    pub fn len(&self) -> usize {
        self.rows.lock().expect("ledger lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn totals(&self) -> UsageTotals {
        self.rows().iter().fold(UsageTotals::default(), |mut t, r| {
            t.prompt_tokens += r.prompt_tokens;
            t.completion_tokens += r.completion_tokens;
            t.api_calls += 1;
            t.cost += r.cost;
            t
        })
    }

    pub fn per_job(&self) -> Vec<JobUsage> {
        let mut jobs: BTreeMap<String, JobUsage> = BTreeMap::new();
        for r in self.rows() {
            let entry = jobs.entry(r.job_id.clone()).or_insert_with(|| JobUsage {
                job_id: r.job_id.clone(),
                patient_id: r.patient_id.clone(),
                strategy: r.strategy,
                prompt_tokens: 0,
                completion_tokens: 0,
                attempts: 0,
                cost: 0.0,
            });
            entry.prompt_tokens += r.prompt_tokens;
            entry.completion_tokens += r.completion_tokens;
            entry.attempts += 1;
            entry.cost += r.cost;
        }
        jobs.into_values().collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        for job in self.per_job() {
            w.serialize(job)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), csv::Error> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(job: &str, attempt: u32, pt: u64, ct: u64) -> LedgerRow {
        LedgerRow::priced(
            job,
            "p",
            Strategy::Acan,
            attempt,
            pt,
            ct,
            Pricing {
                input_per_1k: 0.01,
                output_per_1k: 0.03,
            },
            AttemptOutcome::Ok,
        )
    }

    #[test]
    fn totals_equal_row_sums() {
        let ledger = UsageLedger::new();
        ledger.record(row("b", 1, 1000, 100));
        ledger.record(row("a", 2, 500, 0));
        ledger.record(row("a", 1, 0, 0));
        let t = ledger.totals();
        assert_eq!((t.prompt_tokens, t.completion_tokens, t.api_calls), (1500, 100, 3));
        assert!((t.cost - (0.01 + 0.003 + 0.005)).abs() < 1e-12);
        let jobs = ledger.per_job();
        assert_eq!(jobs.len(), 2);
        assert_eq!(jobs[0].job_id, "a");
        assert_eq!(jobs[0].attempts, 2);
    }

    #[test]
    fn csv_columns() {
        let ledger = UsageLedger::new();
        ledger.record(row("a", 1, 10, 2));
        let mut out = Vec::new();
        ledger.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "job_id,patient_id,strategy,prompt_tokens,completion_tokens,attempts,cost"
        );
        assert!(text.lines().nth(1).unwrap().starts_with("a,p,ACAN,10,2,1,"));
    }
}
