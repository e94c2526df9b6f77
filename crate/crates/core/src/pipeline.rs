//! End-to-end run: plan prompts, assess them concurrently, aggregate.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{aggregate_all, AggregationError, EligibilityProfile};
use crate::assessment::{assess_job, AssessConfig, AssessmentBackend, AssessmentError, CriterionDecision, JobOutcome, UsageLedger};
use crate::corpus::{Corpus, CriterionSpec};
use crate::embedding::EmbeddingIndex;
use crate::prompting::{plan_prompts, PlanOptions, PromptError, PromptJob, Retrieval, SchemaConfig, Strategy, TemplateSet};
use crate::tokenize::TokenCounter;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub strategy: Strategy,
    /// Retrieval depth; `None` injects full notes.
    pub k: Option<usize>,
    #[serde(default)]
    pub schema: SchemaConfig,
    #[serde(default)]
    pub assess: AssessConfig,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_in_flight() -> usize {
    4
}

impl RunConfig {
    pub fn new(strategy: Strategy, k: Option<usize>) -> Self {
        RunConfig {
            strategy,
            k,
            schema: SchemaConfig::default(),
            assess: AssessConfig::default(),
            max_in_flight: default_in_flight(),
        }
    }
}

pub struct RunInputs<'a> {
    pub corpus: &'a Corpus,
    pub criteria: &'a [CriterionSpec],
    pub templates: &'a TemplateSet,
    pub tokenizer: &'a dyn TokenCounter,
    pub index: Option<&'a EmbeddingIndex>,
}

#[derive(Debug, Error)]
pub enum PipelineErrorKind {
    #[error("retrieval depth {0} requested but no embedding index was provided")]
    IndexRequired(usize),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Assessment(#[from] AssessmentError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
}

/// A failed run, carrying the calls made before the failure.
#[derive(Debug, Error)]
#[error("{kind}")]
pub struct PipelineError {
    pub kind: PipelineErrorKind,
    pub ledger: UsageLedger,
}

impl PipelineError {
    pub fn code(&self) -> &'static str {
        match &self.kind {
            PipelineErrorKind::IndexRequired(_) => "INDEX_REQUIRED",
            PipelineErrorKind::Prompt(e) => e.code(),
            PipelineErrorKind::Assessment(e) => e.code(),
            PipelineErrorKind::Aggregation(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub jobs: Vec<PromptJob>,
    /// Sorted by patient, criterion, note date and job.
    pub decisions: Vec<CriterionDecision>,
    pub profiles: Vec<EligibilityProfile>,
    pub ledger: UsageLedger,
    /// Jobs whose answer could not be parsed and were defaulted.
    pub parse_failures: usize,
}

/// Plans every job for the corpus, in patient order.
pub fn plan_run(inputs: &RunInputs<'_>, config: &RunConfig, context_limit: Option<usize>) -> Result<Vec<PromptJob>, PipelineErrorKind> {
    let retrieval = match config.k {
        None => None,
        Some(k) => Some(Retrieval {
            index: inputs.index.ok_or(PipelineErrorKind::IndexRequired(k))?,
            k,
        }),
    };
    let options = PlanOptions {
        schema: &config.schema,
        templates: inputs.templates,
        tokenizer: inputs.tokenizer,
        context_limit,
        retrieval,
    };
    let mut jobs = Vec::new();
    for patient in inputs.corpus.patients() {
        jobs.extend(plan_prompts(config.strategy, patient, inputs.criteria, &options)?);
    }
    Ok(jobs)
}

pub fn run_pipeline(inputs: &RunInputs<'_>, config: &RunConfig, backend: &dyn AssessmentBackend) -> Result<RunResult, PipelineError> {
    run_pipeline_with_progress(inputs, config, backend, &|_, _| {})
}

/// Runs the pipeline, calling `progress(done, total)` after each job.
/// Stops dispatching new jobs at the first backend failure.
pub fn run_pipeline_with_progress(
    inputs: &RunInputs<'_>,
    config: &RunConfig,
    backend: &dyn AssessmentBackend,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<RunResult, PipelineError> {
    let ledger = UsageLedger::new();
    let fail = |kind: PipelineErrorKind, ledger: &UsageLedger| PipelineError {
        kind,
        ledger: ledger.clone(),
    };
    let prompt_budget = backend.context_limit().saturating_sub(config.assess.max_output_tokens);
    let jobs = plan_run(inputs, config, Some(prompt_budget)).map_err(|k| fail(k, &ledger))?;

    let outcomes: Mutex<Vec<Option<JobOutcome>>> = Mutex::new(vec![None; jobs.len()]);
    let first_error: Mutex<Option<AssessmentError>> = Mutex::new(None);
    let next = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let workers = config.max_in_flight.clamp(1, jobs.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                match assess_job(backend, job, &config.schema, &config.assess, &ledger) {
                    Ok(outcome) => {
                        outcomes.lock().expect("poisoned")[i] = Some(outcome);
                        progress(done.fetch_add(1, Ordering::SeqCst) + 1, jobs.len());
                    }
                    Err(e) => {
                        failed.store(true, Ordering::SeqCst);
                        first_error.lock().expect("poisoned").get_or_insert(e);
                        break;
                    }
                }
            });
        }
    });

    if let Some(e) = first_error.into_inner().expect("poisoned") {
        return Err(fail(e.into(), &ledger));
    }
    let outcomes: Vec<JobOutcome> = outcomes
        .into_inner()
        .expect("poisoned")
        .into_iter()
        .map(|o| o.expect("every job assessed"))
        .collect();
    let parse_failures = outcomes.iter().filter(|o| o.parse_error.is_some()).count();
    let mut decisions: Vec<CriterionDecision> = outcomes.into_iter().flat_map(|o| o.decisions).collect();
    decisions.sort_by(|a, b| {
        (&a.patient_id, &a.criterion_id, a.note_date, &a.note_id, &a.job_id).cmp(&(
            &b.patient_id,
            &b.criterion_id,
            b.note_date,
            &b.note_id,
            &b.job_id,
        ))
    });
    let profiles = aggregate_all(&decisions, inputs.criteria, inputs.corpus).map_err(|e| fail(e.into(), &ledger))?;
    Ok(RunResult {
        jobs,
        decisions,
        profiles,
        ledger,
        parse_failures,
    })
}
