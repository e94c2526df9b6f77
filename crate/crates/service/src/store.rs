//! Run, decision, ledger and review stores, each an append-only log with an
//! in-memory index rebuilt on open.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, RwLock};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use trialmatch_core::aggregation::EligibilityProfile;
use trialmatch_core::assessment::{LedgerRow, UsageLedger, UsageTotals};

use crate::event_log::{EventLog, StoreError};
use crate::model::{
    DecisionRow, ErrorSummary, MatchRun, ReviewSummary, ReviewVerdict, ReviewerTally, RunSettings, RunStatus, Tally,
    Verdict,
};

/// Error code given to runs that were pending or running when the process
/// stopped.
pub const INTERRUPTED: &str = "INTERRUPTED";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum RunEvent {
    Created {
        run: MatchRun,
    },
    Started {
        run_id: String,
        at: String,
    },
    Finished {
        run_id: String,
        at: String,
        ledger: UsageTotals,
        parse_failures: usize,
    },
    Failed {
        run_id: String,
        at: String,
        error: ErrorSummary,
        ledger: Option<UsageTotals>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DecisionRecord {
    run_id: String,
    profile: EligibilityProfile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LedgerRecord {
    run_id: String,
    #[serde(flatten)]
    row: LedgerRow,
}

#[derive(Debug, Error)]
pub enum CreateRunError {
    #[error("idempotency key {key:?} was already used for run {run_id} with a different configuration")]
    KeyConflict { key: String, run_id: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("no decision for patient {patient_id:?}, criterion {criterion_id:?} in a completed run {run_id:?}")]
    UnknownDecision {
        run_id: String,
        patient_id: String,
        criterion_id: String,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub struct NewReview {
    pub run_id: String,
    pub patient_id: String,
    pub criterion_id: String,
    pub verdict: Verdict,
    pub reviewer_id: String,
    pub note: Option<String>,
}

#[derive(Default)]
struct State {
    runs: BTreeMap<String, MatchRun>,
    by_key: HashMap<String, String>,
    /// Decision rows of DONE runs, sorted by (patient, criterion).
    rows: HashMap<String, Arc<Vec<DecisionRow>>>,
    reviews: Vec<ReviewVerdict>,
}

impl State {
    fn apply(&mut self, event: RunEvent, profiles: &mut HashMap<String, Vec<EligibilityProfile>>) {
        match event {
            RunEvent::Created { run } => {
                if let Some(key) = &run.idempotency_key {
                    self.by_key.insert(key.clone(), run.run_id.clone());
                }
                self.runs.insert(run.run_id.clone(), run);
            }
            RunEvent::Started { run_id, at } => {
                if let Some(run) = self.runs.get_mut(&run_id) {
                    run.status = RunStatus::Running;
                    run.started_at = Some(at);
                }
            }
            RunEvent::Finished {
                run_id,
                at,
                ledger,
                parse_failures,
            } => {
                if let Some(run) = self.runs.get_mut(&run_id) {
                    let results = Arc::new(profiles.remove(&run_id).unwrap_or_default());
                    let mut rows: Vec<DecisionRow> = results.iter().flat_map(DecisionRow::from_profile).collect();
                    rows.sort_by(|a, b| (&a.patient_id, &a.criterion_id).cmp(&(&b.patient_id, &b.criterion_id)));
                    self.rows.insert(run_id, Arc::new(rows));
                    run.status = RunStatus::Done;
                    run.finished_at = Some(at);
                    run.ledger = Some(ledger);
                    run.parse_failures = Some(parse_failures);
                    run.results = Some(results);
                }
            }
            RunEvent::Failed {
                run_id,
                at,
                error,
                ledger,
            } => {
                if let Some(run) = self.runs.get_mut(&run_id) {
                    run.status = RunStatus::Failed;
                    run.finished_at = Some(at);
                    run.ledger = ledger;
                    run.error = Some(error);
                }
            }
        }
    }
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub struct Store {
    runs_log: EventLog,
    decisions_log: EventLog,
    ledger_log: EventLog,
    reviews_log: EventLog,
    state: RwLock<State>,
}

impl Store {
    /// Opens the stores under `dir`, replays them, and marks runs that never
    /// finished as FAILED with code `INTERRUPTED`.
    pub fn open(dir: impl AsRef<Path>) -> Result<Store, StoreError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|source| StoreError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let (runs_log, events) = EventLog::open::<RunEvent>(dir.join("runs.jsonl"))?;
        let (decisions_log, decisions) = EventLog::open::<DecisionRecord>(dir.join("decisions.jsonl"))?;
        let (ledger_log, _) = EventLog::open::<LedgerRecord>(dir.join("ledger.jsonl"))?;
        let (reviews_log, reviews) = EventLog::open::<ReviewVerdict>(dir.join("reviews.jsonl"))?;

        let mut profiles: HashMap<String, Vec<EligibilityProfile>> = HashMap::new();
        for d in decisions {
            profiles.entry(d.run_id).or_default().push(d.profile);
        }
        let mut state = State {
            reviews,
            ..Default::default()
        };
        for event in events {
            state.apply(event, &mut profiles);
        }

        let store = Store {
            runs_log,
            decisions_log,
            ledger_log,
            reviews_log,
            state: RwLock::new(State::default()),
        };
        let unfinished: Vec<String> = state
            .runs
            .values()
            .filter(|r| matches!(r.status, RunStatus::Pending | RunStatus::Running))
            .map(|r| r.run_id.clone())
            .collect();
        for run_id in unfinished {
            log::warn!("run {run_id} did not finish before the last shutdown; marking it failed");
            let event = RunEvent::Failed {
                run_id,
                at: now(),
                error: ErrorSummary {
                    code: INTERRUPTED.into(),
                    message: "the service stopped before this run finished".into(),
                },
                ledger: None,
            };
            store.runs_log.append(&event)?;
            state.apply(event, &mut profiles);
        }
        *store.state.write().expect("state lock poisoned") = state;
        Ok(store)
    }

    /// Creates a PENDING run, or returns the existing run for a reused
    /// idempotency key. The flag is true when a new run was created.
    pub fn create_run(&self, idempotency_key: Option<String>, config: RunSettings) -> Result<(MatchRun, bool), CreateRunError> {
        let mut state = self.state.write().expect("state lock poisoned");
        if let Some(key) = &idempotency_key {
            if let Some(run_id) = state.by_key.get(key) {
                let existing = &state.runs[run_id];
                if existing.config != config {
                    return Err(CreateRunError::KeyConflict {
                        key: key.clone(),
                        run_id: run_id.clone(),
                    });
                }
                return Ok((existing.summary(), false));
            }
        }
        let run = MatchRun {
            run_id: format!("run-{:05}", state.runs.len() + 1),
            idempotency_key,
            status: RunStatus::Pending,
            config,
            created_at: now(),
            started_at: None,
            finished_at: None,
            ledger: None,
            parse_failures: None,
            error: None,
            results: None,
        };
        let event = RunEvent::Created { run: run.clone() };
        self.runs_log.append(&event)?;
        state.apply(event, &mut HashMap::new());
        Ok((run, true))
    }

    fn append_run_event(&self, event: RunEvent, profiles: &mut HashMap<String, Vec<EligibilityProfile>>) -> Result<(), StoreError> {
        let mut state = self.state.write().expect("state lock poisoned");
        self.runs_log.append(&event)?;
        state.apply(event, profiles);
        Ok(())
    }

    pub fn mark_running(&self, run_id: &str) -> Result<(), StoreError> {
        self.append_run_event(
            RunEvent::Started {
                run_id: run_id.into(),
                at: now(),
            },
            &mut HashMap::new(),
        )
    }

    fn append_ledger(&self, run_id: &str, ledger: &UsageLedger) -> Result<(), StoreError> {
        let records: Vec<LedgerRecord> = ledger
            .rows()
            .into_iter()
            .map(|row| LedgerRecord {
                run_id: run_id.into(),
                row,
            })
            .collect();
        self.ledger_log.append_all(&records)
    }

    /// Persists results, then the DONE event. Results without a DONE event
    /// are ignored on replay, so a crash in between leaves no partial run.
    pub fn finish_run(
        &self,
        run_id: &str,
        profiles: Vec<EligibilityProfile>,
        ledger: &UsageLedger,
        parse_failures: usize,
    ) -> Result<(), StoreError> {
        let records: Vec<DecisionRecord> = profiles
            .iter()
            .map(|p| DecisionRecord {
                run_id: run_id.into(),
                profile: p.clone(),
            })
            .collect();
        self.decisions_log.append_all(&records)?;
        self.append_ledger(run_id, ledger)?;
        self.append_run_event(
            RunEvent::Finished {
                run_id: run_id.into(),
                at: now(),
                ledger: ledger.totals(),
                parse_failures,
            },
            &mut HashMap::from([(run_id.to_string(), profiles)]),
        )
    }

    /// Marks a run FAILED, keeping whatever usage it accrued.
    pub fn fail_run(&self, run_id: &str, error: ErrorSummary, ledger: Option<&UsageLedger>) -> Result<(), StoreError> {
        if let Some(l) = ledger {
            self.append_ledger(run_id, l)?;
        }
        self.append_run_event(
            RunEvent::Failed {
                run_id: run_id.into(),
                at: now(),
                error,
                ledger: ledger.map(UsageLedger::totals),
            },
            &mut HashMap::new(),
        )
    }

    pub fn run(&self, run_id: &str) -> Option<MatchRun> {
        self.state.read().expect("state lock poisoned").runs.get(run_id).cloned()
    }

    /// All runs in creation order, without results.
    pub fn runs(&self) -> Vec<MatchRun> {
        self.state
            .read()
            .expect("state lock poisoned")
            .runs
            .values()
            .map(MatchRun::summary)
            .collect()
    }

    pub fn decision_rows(&self, run_id: &str) -> Option<Arc<Vec<DecisionRow>>> {
        self.state.read().expect("state lock poisoned").rows.get(run_id).cloned()
    }

    /// Ledger rows recorded for a run, in append order.
    pub fn ledger_rows(&self, run_id: &str) -> Result<Vec<LedgerRow>, StoreError> {
        let records: Vec<LedgerRecord> = self.ledger_log.replay()?;
        Ok(records.into_iter().filter(|r| r.run_id == run_id).map(|r| r.row).collect())
    }

    pub fn add_review(&self, review: NewReview) -> Result<ReviewVerdict, ReviewError> {
        let mut state = self.state.write().expect("state lock poisoned");
        let exists = state.rows.get(&review.run_id).is_some_and(|rows| {
            rows.binary_search_by(|r| {
                (r.patient_id.as_str(), r.criterion_id.as_str()).cmp(&(review.patient_id.as_str(), review.criterion_id.as_str()))
            })
            .is_ok()
        });
        if !exists {
            return Err(ReviewError::UnknownDecision {
                run_id: review.run_id,
                patient_id: review.patient_id,
                criterion_id: review.criterion_id,
            });
        }
        let verdict = ReviewVerdict {
            review_id: format!("rev-{:06}", state.reviews.len() + 1),
            run_id: review.run_id,
            patient_id: review.patient_id,
            criterion_id: review.criterion_id,
            verdict: review.verdict,
            reviewer_id: review.reviewer_id,
            note: review.note,
            created_at: now(),
        };
        self.reviews_log.append(&verdict)?;
        state.reviews.push(verdict.clone());
        Ok(verdict)
    }

    /// Full review history in submission order.
    pub fn reviews(&self) -> Vec<ReviewVerdict> {
        self.state.read().expect("state lock poisoned").reviews.clone()
    }

    pub fn review_summary(&self, run_id: &str) -> ReviewSummary {
        let state = self.state.read().expect("state lock poisoned");
        let history: Vec<&ReviewVerdict> = state.reviews.iter().filter(|r| r.run_id == run_id).collect();
        // Later rows supersede earlier ones from the same reviewer.
        let mut latest: BTreeMap<(&str, &str, &str), Verdict> = BTreeMap::new();
        for r in &history {
            latest.insert((&r.reviewer_id, &r.patient_id, &r.criterion_id), r.verdict);
        }
        let mut summary = ReviewSummary {
            run_id: run_id.into(),
            history_rows: history.len() as u64,
            reviewed_decisions: 0,
            counts: Tally::default(),
            per_criterion: BTreeMap::new(),
            per_reviewer: BTreeMap::new(),
        };
        let mut decisions = std::collections::BTreeSet::new();
        for ((reviewer, patient, criterion), verdict) in latest {
            decisions.insert((patient, criterion));
            summary.counts.add(verdict);
            summary.per_criterion.entry(criterion.to_string()).or_default().add(verdict);
            let mine: &mut ReviewerTally = summary.per_reviewer.entry(reviewer.to_string()).or_default();
            mine.counts.add(verdict);
            mine.per_criterion.entry(criterion.to_string()).or_default().add(verdict);
        }
        summary.reviewed_decisions = decisions.len() as u64;
        summary
    }
}
