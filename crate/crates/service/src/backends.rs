use trialmatch_core::assessment::{AssessmentBackend, OracleBackend, PriceSheet, RemoteChatBackend, ORACLE_BACKEND_ID};
use trialmatch_core::corpus::CriterionSpec;

/// Backend selection as it appears in a run request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendSpec {
    /// `oracle` or `remote:<base url>`.
    pub backend: String,
    pub model: Option<String>,
}

/// Builds assessment backends for runs. Called once when a run is created
/// (to validate the spec) and again when it executes.
pub trait BackendFactory: Send + Sync {
    fn create(&self, spec: &BackendSpec) -> Result<Box<dyn AssessmentBackend>, String>;
}

impl<F> BackendFactory for F
where
    F: Fn(&BackendSpec) -> Result<Box<dyn AssessmentBackend>, String> + Send + Sync,
{
    fn create(&self, spec: &BackendSpec) -> Result<Box<dyn AssessmentBackend>, String> {
        self(spec)
    }
}

pub struct DefaultBackends {
    pub criteria: Vec<CriterionSpec>,
    pub prices: PriceSheet,
    /// Context window assumed for remote models.
    pub remote_context_limit: usize,
}

impl DefaultBackends {
    pub fn new(criteria: Vec<CriterionSpec>) -> Self {
        DefaultBackends {
            criteria,
            prices: PriceSheet::default(),
            remote_context_limit: 128_000,
        }
    }
}

impl BackendFactory for DefaultBackends {
    fn create(&self, spec: &BackendSpec) -> Result<Box<dyn AssessmentBackend>, String> {
        if spec.backend == ORACLE_BACKEND_ID {
            let oracle = OracleBackend::new(&self.criteria).with_pricing(self.prices.get(ORACLE_BACKEND_ID));
            return Ok(Box::new(oracle));
        }
        if let Some(url) = spec.backend.strip_prefix("remote:") {
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                return Err(format!("remote backend URL {url:?} must start with http:// or https://"));
            }
            let model = spec
                .model
                .as_deref()
                .filter(|m| !m.trim().is_empty())
                .ok_or("remote backends need a model name")?;
            let id = format!("remote:{}", url.trim_end_matches('/'));
            let backend = RemoteChatBackend::new(url, model, self.remote_context_limit, self.prices.get(&id))
                .map_err(|e| e.to_string())?;
            return Ok(Box::new(backend));
        }
        Err(format!("unknown backend {:?}; expected \"oracle\" or \"remote:<url>\"", spec.backend))
    }
}
