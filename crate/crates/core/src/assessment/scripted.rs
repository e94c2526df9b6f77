use std::collections::VecDeque;
use std::sync::Mutex;

use super::{AssessmentBackend, AssessmentRequest, BackendError, Completion, Pricing};

/// A scripted reply: a failure, or a completion text.
#[derive(Debug, Clone)]
pub enum Scripted {
    Fail(BackendError),
    Reply(String),
}

/// Fault-injection wrapper: serves scripted replies in call order, then
/// delegates to the inner backend.
pub struct ScriptedBackend<B> {
    inner: B,
    script: Mutex<VecDeque<Scripted>>,
    calls: Mutex<Vec<AssessmentRequest>>,
}

impl<B: AssessmentBackend> ScriptedBackend<B> {
    pub fn new(inner: B, script: impl IntoIterator<Item = Scripted>) -> Self {
        ScriptedBackend {
            inner,
            script: Mutex::new(script.into_iter().collect()),
            calls: Mutex::new(Vec::new()),
        }
    }

    /// Every request received, in order.
    pub fn calls(&self) -> Vec<AssessmentRequest> {
        self.calls.lock().expect("poisoned").clone()
    }
}

impl<B: AssessmentBackend> AssessmentBackend for ScriptedBackend<B> {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn context_limit(&self) -> usize {
        self.inner.context_limit()
    }

    fn pricing(&self) -> Pricing {
        self.inner.pricing()
    }

    fn complete(&self, request: &AssessmentRequest) -> Result<Completion, BackendError> {
        self.calls.lock().expect("poisoned").push(request.clone());
        let next = self.script.lock().expect("poisoned").pop_front();
        match next {
            Some(Scripted::Fail(e)) => Err(e),
            Some(Scripted::Reply(text)) => {
                let real = self.inner.complete(request)?;
                Ok(Completion {
                    completion_tokens: text.split_whitespace().count() as u64,
                    prompt_tokens: real.prompt_tokens,
                    text,
                })
            }
            None => self.inner.complete(request),
        }
    }
}
