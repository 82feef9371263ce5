//! One structured log event per backend call.

use std::sync::Arc;
use std::time::Instant;

use groundconv::prompts::detect_state;
use groundconv::{Backend, BackendError, CompletionResult, DecodingParams};
use serde_json::json;

/// Emits a JSON event at `info` level for every completion request.
pub struct LoggingBackend {
    inner: Arc<dyn Backend>,
}

impl LoggingBackend {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        LoggingBackend { inner }
    }

    fn log(&self, prompt: &str, dec: &DecodingParams, started: Instant, res: &Result<CompletionResult, BackendError>) {
        let state = detect_state(prompt).map(|s| s.as_str());
        let mut event = json!({
            "event": "backend_call",
            "backend": self.inner.name(),
            "state": state,
            "prompt_chars": prompt.chars().count(),
            "max_new_tokens": dec.max_new_tokens,
            "seed": dec.seed,
            "latency_ms": started.elapsed().as_secs_f64() * 1000.0,
        });
        match res {
            Ok(r) => {
                event["ok"] = json!(true);
                event["completion_chars"] = json!(r.text.chars().count());
            }
            Err(e) => {
                event["ok"] = json!(false);
                event["error"] = json!(e.to_string());
            }
        }
        log::info!(target: "groundconv::backend", "{event}");
    }
}

impl Backend for LoggingBackend {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete_raw(&self, prompt: &str, dec: &DecodingParams) -> Result<CompletionResult, BackendError> {
        let started = Instant::now();
        let res = self.inner.complete_raw(prompt, dec);
        self.log(prompt, dec, started, &res);
        res
    }

    fn complete(&self, prompt: &str, dec: &DecodingParams) -> Result<CompletionResult, BackendError> {
        let started = Instant::now();
        let res = self.inner.complete(prompt, dec);
        self.log(prompt, dec, started, &res);
        res
    }
}
