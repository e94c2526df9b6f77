//! HTTP service exposing match runs, their per-criterion decisions, and
//! reviewer verdicts, persisted as append-only JSONL logs in a data directory:
//!
//! - `runs.jsonl`: run lifecycle events (created, started, finished, failed)
//! - `decisions.jsonl`: one eligibility profile per line for finished runs
//! - `ledger.jsonl`: one usage row per backend attempt
//! - `reviews.jsonl`: every submitted verdict
//!
//! Runs execute on background threads, one at a time by default.

pub mod api;
pub mod backends;
mod event_log;
pub mod model;
pub mod store;
mod worker;

use std::future::Future;
use std::path::PathBuf;
use std::sync::{mpsc, Arc, Mutex};

use sha2::{Digest, Sha256};
use trialmatch_core::corpus::{write_jsonl, Corpus, CriterionSpec, GroundTruth};
use trialmatch_core::embedding::{EmbeddingBackend, EmbeddingIndex, HashingEmbedder, IndexConfig};
use trialmatch_core::prompting::TemplateSet;
use trialmatch_core::tokenize::{TokenCounter, WhitespaceTokenCounter};

pub use backends::{BackendFactory, BackendSpec, DefaultBackends};
pub use event_log::StoreError;
pub use store::Store;

pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Runs are refused until a corpus is loaded.
    pub corpus: Option<Corpus>,
    pub criteria: Vec<CriterionSpec>,
    pub templates: TemplateSet,
    pub tokenizer: Arc<dyn TokenCounter>,
    pub embedder: Arc<dyn EmbeddingBackend>,
    pub index_config: IndexConfig,
    pub backends: Arc<dyn BackendFactory>,
    /// Runs executing at once.
    pub workers: usize,
}

impl ServiceConfig {
    /// Oracle and remote backends, hashing embeddings, one worker.
    pub fn new(data_dir: impl Into<PathBuf>, corpus: Option<Corpus>, criteria: Vec<CriterionSpec>) -> Self {
        ServiceConfig {
            data_dir: data_dir.into(),
            corpus,
            backends: Arc::new(DefaultBackends::new(criteria.clone())),
            criteria,
            templates: TemplateSet::default(),
            tokenizer: Arc::new(WhitespaceTokenCounter),
            embedder: Arc::new(HashingEmbedder::default()),
            index_config: IndexConfig::default(),
            workers: 1,
        }
    }
}

fn short_digest(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))[..16].to_string()
}

/// Identifies a criteria set; stored with every run.
pub fn criteria_version(criteria: &[CriterionSpec]) -> String {
    short_digest(&serde_json::to_vec(criteria).expect("criteria serialize"))
}

pub(crate) struct Shared {
    pub store: Store,
    pub config: ServiceConfig,
    pub labels: Option<GroundTruth>,
    pub criteria_version: String,
    /// Cache key for the on-disk embedding index.
    pub corpus_digest: Option<String>,
    pub index: Mutex<Option<Arc<EmbeddingIndex>>>,
}

pub struct Service {
    shared: Arc<Shared>,
    queue: Mutex<mpsc::Sender<String>>,
}

impl Service {
    /// Opens the data directory, replays the logs and starts the workers.
    pub fn open(config: ServiceConfig) -> Result<Service, StoreError> {
        let store = Store::open(&config.data_dir)?;
        let labels = config
            .corpus
            .as_ref()
            .filter(|c| c.has_labels())
            .map(GroundTruth::from_corpus);
        let corpus_digest = config.corpus.as_ref().map(|c| {
            let mut bytes = Vec::new();
            write_jsonl(c, &mut bytes).expect("in-memory write");
            bytes.extend(serde_json::to_vec(&config.criteria).expect("criteria serialize"));
            short_digest(&bytes)
        });
        let shared = Arc::new(Shared {
            store,
            labels,
            criteria_version: criteria_version(&config.criteria),
            corpus_digest,
            index: Mutex::new(None),
            config,
        });
        let (tx, rx) = mpsc::channel();
        worker::spawn(Arc::clone(&shared), rx);
        Ok(Service {
            shared,
            queue: Mutex::new(tx),
        })
    }

    pub fn store(&self) -> &Store {
        &self.shared.store
    }

    pub(crate) fn enqueue(&self, run_id: String) {
        // Workers only stop once every sender is gone, so this cannot fail
        // while the service is alive.
        let _ = self.queue.lock().expect("queue lock poisoned").send(run_id);
    }

    pub fn router(self) -> axum::Router {
        api::router(Arc::new(self))
    }

    /// Serves HTTP on `listener` until `shutdown` resolves.
    pub async fn serve(
        self,
        listener: tokio::net::TcpListener,
        shutdown: impl Future<Output = ()> + Send + 'static,
    ) -> std::io::Result<()> {
        axum::serve(listener, self.router())
            .with_graceful_shutdown(shutdown)
            .await
    }
}
