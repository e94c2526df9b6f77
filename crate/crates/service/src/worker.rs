use std::panic::AssertUnwindSafe;
use std::sync::{mpsc, Arc, Mutex};

use trialmatch_core::embedding::EmbeddingIndex;
use trialmatch_core::pipeline::{run_pipeline, RunConfig, RunInputs};

use crate::backends::BackendSpec;
use crate::model::{ErrorSummary, MatchRun};
use crate::{Shared, StoreError};

pub(crate) fn spawn(shared: Arc<Shared>, queue: mpsc::Receiver<String>) {
    let queue = Arc::new(Mutex::new(queue));
    for i in 0..shared.config.workers.max(1) {
        let (shared, queue) = (Arc::clone(&shared), Arc::clone(&queue));
        std::thread::Builder::new()
            .name(format!("run-worker-{i}"))
            .spawn(move || loop {
                let next = queue.lock().expect("queue lock poisoned").recv();
                let Ok(run_id) = next else { break };
                execute(&shared, &run_id);
            })
            .expect("spawn worker thread");
    }
}

fn error(code: &str, message: impl Into<String>) -> ErrorSummary {
    ErrorSummary {
        code: code.into(),
        message: message.into(),
    }
}

fn execute(shared: &Shared, run_id: &str) {
    let Some(run) = shared.store.run(run_id) else {
        log::error!("queued run {run_id} does not exist");
        return;
    };
    if let Err(e) = shared.store.mark_running(run_id) {
        log::error!("cannot start run {run_id}: {e}");
        return;
    }
    log::info!("run {run_id} started");
    let outcome = std::panic::catch_unwind(AssertUnwindSafe(|| run_to_completion(shared, &run)));
    let stored = match outcome {
        Ok(stored) => stored,
        Err(panic) => {
            let message = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "worker panicked".into());
            shared.store.fail_run(run_id, error("INTERNAL", message), None)
        }
    };
    if let Err(e) = stored {
        log::error!("cannot record outcome of run {run_id}: {e}");
    }
}

/// Runs the pipeline and records the outcome, DONE or FAILED.
fn run_to_completion(shared: &Shared, run: &MatchRun) -> Result<(), StoreError> {
    let fail = |e: ErrorSummary, ledger| {
        log::warn!("run {} failed: {}: {}", run.run_id, e.code, e.message);
        shared.store.fail_run(&run.run_id, e, ledger)
    };
    let Some(corpus) = shared.config.corpus.as_ref() else {
        return fail(error("CORPUS_NOT_LOADED", "no corpus is loaded"), None);
    };
    let settings = &run.config;
    let spec = BackendSpec {
        backend: settings.backend.clone(),
        model: settings.model.clone(),
    };
    let backend = match shared.config.backends.create(&spec) {
        Ok(b) => b,
        Err(e) => return fail(error("BACKEND_ERROR", e), None),
    };
    let index = match settings.k {
        Some(_) => match index_for(shared) {
            Ok(i) => Some(i),
            Err(e) => return fail(e, None),
        },
        None => None,
    };
    let inputs = RunInputs {
        corpus,
        criteria: &shared.config.criteria,
        templates: &shared.config.templates,
        tokenizer: shared.config.tokenizer.as_ref(),
        index: index.as_deref(),
    };
    let mut config = RunConfig::new(settings.strategy, settings.k);
    config.schema = settings.schema.clone();
    config.max_in_flight = settings.max_in_flight;
    match run_pipeline(&inputs, &config, backend.as_ref()) {
        Ok(result) => {
            log::info!("run {} done: {} jobs", run.run_id, result.jobs.len());
            shared
                .store
                .finish_run(&run.run_id, result.profiles, &result.ledger, result.parse_failures)
        }
        Err(e) => fail(error(e.code(), e.to_string()), Some(&e.ledger)),
    }
}

/// Loads or builds the embedding index, cached on disk by corpus digest and
/// in memory for the life of the process.
fn index_for(shared: &Shared) -> Result<Arc<EmbeddingIndex>, ErrorSummary> {
    let mut cached = shared.index.lock().expect("index lock poisoned");
    if let Some(index) = cached.as_ref() {
        return Ok(Arc::clone(index));
    }
    let digest = shared.corpus_digest.as_deref().unwrap_or_default();
    let corpus = shared.config.corpus.as_ref().expect("checked by caller");
    let path = shared.config.data_dir.join(format!("index-{digest}.bin"));
    let index = EmbeddingIndex::load_or_build(
        &path,
        corpus,
        &shared.config.criteria,
        shared.config.embedder.as_ref(),
        shared.config.tokenizer.as_ref(),
        &shared.config.index_config,
    )
    .map_err(|e| error(e.code(), e.to_string()))?;
    let index = Arc::new(index);
    *cached = Some(Arc::clone(&index));
    Ok(index)
}
