//! Completion backends.
//!
//! Every backend speaks plain text completion: a prompt goes in, a
//! continuation comes out. [`HttpBackend`] talks to any server implementing
//! the open completions protocol (`POST {model, prompt, max_tokens,
//! temperature, top_p, stop}`); [`ScriptedBackend`] and [`FnBackend`] are
//! deterministic doubles used by tests and dry runs.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::BackendError;
use crate::types::State;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodingMode {
    Greedy,
    Nucleus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub mode: DecodingMode,
    /// Only meaningful for [`DecodingMode::Nucleus`].
    #[serde(default = "one")]
    pub top_p: f64,
    /// Only meaningful for [`DecodingMode::Nucleus`].
    #[serde(default = "one")]
    pub temperature: f64,
    pub max_new_tokens: usize,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    /// Sampling seed forwarded to the server, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn one() -> f64 {
    1.0
}

impl DecodingParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        DecodingParams {
            mode: DecodingMode::Greedy,
            top_p: 1.0,
            temperature: 1.0,
            max_new_tokens,
            stop_sequences: Vec::new(),
            seed: None,
        }
    }

    pub fn nucleus(top_p: f64, max_new_tokens: usize) -> Self {
        DecodingParams {
            mode: DecodingMode::Nucleus,
            top_p,
            temperature: 1.0,
            max_new_tokens,
            stop_sequences: Vec::new(),
            seed: None,
        }
    }

    pub fn with_stops<S: Into<String>>(mut self, stops: impl IntoIterator<Item = S>) -> Self {
        self.stop_sequences = stops.into_iter().map(Into::into).collect();
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.mode == DecodingMode::Nucleus {
            if !(self.top_p > 0.0 && self.top_p <= 1.0) {
                return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
            }
            if !(self.temperature >= 0.0) {
                return Err(format!("temperature must be non-negative, got {}", self.temperature));
            }
        }
        if self.max_new_tokens == 0 {
            return Err("max_new_tokens must be positive".into());
        }
        Ok(())
    }

    /// `(temperature, top_p)` as sent on the wire; greedy becomes temperature 0.
    pub fn wire_sampling(&self) -> (f64, f64) {
        match self.mode {
            DecodingMode::Greedy => (0.0, 1.0),
            DecodingMode::Nucleus => (self.temperature, self.top_p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ApiStyle {
    #[default]
    CompletionsV1,
}

/// Connection settings for one completion endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Filled from the enclosing map key when loaded from a config file.
    #[serde(default)]
    pub name: String,
    pub endpoint_url: String,
    pub model: String,
    #[serde(default)]
    pub api_style: ApiStyle,
    /// Name of the environment variable holding a bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    /// Retries after the first attempt.
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
}

fn default_timeout_secs() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    2
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_max_concurrency() -> usize {
    4
}

impl BackendConfig {
    pub fn new(name: &str, endpoint_url: &str, model: &str) -> Self {
        BackendConfig {
            name: name.into(),
            endpoint_url: endpoint_url.into(),
            model: model.into(),
            api_style: ApiStyle::CompletionsV1,
            auth_env: None,
            timeout_secs: default_timeout_secs(),
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            max_concurrency: default_max_concurrency(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let url = reqwest::Url::parse(&self.endpoint_url)
            .map_err(|e| format!("backend {}: bad endpoint_url: {e}", self.name))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(format!("backend {}: endpoint must be http(s)", self.name));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(format!("backend {}: timeout must be positive", self.name));
        }
        if self.max_concurrency == 0 {
            return Err(format!("backend {}: max_concurrency must be ≥ 1", self.name));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub text: String,
    pub usage: Option<Usage>,
    pub latency: Duration,
}

/// Truncates `text` at the earliest occurrence of any stop sequence.
pub fn apply_stop_sequences<'a>(text: &'a str, stops: &[String]) -> &'a str {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    &text[..cut]
}

/// A text-completion model.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    /// Produces the raw continuation of `prompt`.
    fn complete_raw(&self, prompt: &str, dec: &DecodingParams) -> Result<CompletionResult, BackendError>;

    /// Completes `prompt`, then applies stop sequences client-side.
    fn complete(&self, prompt: &str, dec: &DecodingParams) -> Result<CompletionResult, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        let mut res = self.complete_raw(prompt, dec)?;
        let cut = apply_stop_sequences(&res.text, &dec.stop_sequences).len();
        res.text.truncate(cut);
        Ok(res)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn complete_raw(&self, prompt: &str, dec: &DecodingParams) -> Result<CompletionResult, BackendError> {
        (**self).complete_raw(prompt, dec)
    }

    fn complete(&self, prompt: &str, dec: &DecodingParams) -> Result<CompletionResult, BackendError> {
        (**self).complete(prompt, dec)
    }
}

/// JSON body of a completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub stop: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CompletionRequest {
    pub fn new(model: &str, prompt: &str, dec: &DecodingParams) -> Self {
        let (temperature, top_p) = dec.wire_sampling();
        CompletionRequest {
            model: model.to_string(),
            prompt: prompt.to_string(),
            max_tokens: dec.max_new_tokens,
            temperature,
            top_p,
            stop: dec.stop_sequences.clone(),
            seed: dec.seed,
        }
    }
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    text: String,
}

/// Counting semaphore capping in-flight requests.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Client for an HTTP completions endpoint, with retry and a concurrency cap.
pub struct HttpBackend {
    cfg: BackendConfig,
    client: reqwest::blocking::Client,
    token: Option<String>,
    limiter: Limiter,
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        cfg.validate().map_err(BackendError::InvalidRequest)?;
        let token = match &cfg.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::InvalidRequest(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let limiter = Limiter::new(cfg.max_concurrency);
        Ok(HttpBackend {
            cfg,
            client,
            token,
            limiter,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    fn attempt(&self, body: &[u8]) -> Result<CompletionResponse, BackendError> {
        let mut req = self
            .client
            .post(&self.cfg.endpoint_url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_vec());
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| self.map_transport(e))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| self.map_transport(e))?;
        if !status.is_success() {
            return Err(BackendError::HttpStatus {
                code: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::MalformedResponse(e.to_string()))
    }

    fn map_transport(&self, e: reqwest::Error) -> BackendError {
        if e.is_timeout() {
            BackendError::Timeout(Duration::from_secs_f64(self.cfg.timeout_secs))
        } else {
            BackendError::Transport(e.to_string())
        }
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        &self.cfg.name
    }

    fn complete_raw(&self, prompt: &str, dec: &DecodingParams) -> Result<CompletionResult, BackendError> {
        dec.validate().map_err(BackendError::InvalidRequest)?;
        let body = serde_json::to_vec(&CompletionRequest::new(&self.cfg.model, prompt, dec))
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let _slot = self.limiter.acquire();
        let started = Instant::now();
        let mut attempt = 0u32;
        loop {
            match self.attempt(&body) {
                Ok(resp) => {
                    let choice = resp.choices.into_iter().next().ok_or_else(|| {
                        BackendError::MalformedResponse("response has no choices".into())
                    })?;
                    return Ok(CompletionResult {
                        text: choice.text,
                        usage: resp.usage,
                        latency: started.elapsed(),
                    });
                }
                Err(e) if e.is_transient() && attempt < self.cfg.retries => {
                    let wait = self.cfg.backoff_ms.saturating_mul(1u64 << attempt.min(16));
                    log::warn!(
                        "backend {}: attempt {} failed ({e}); retrying in {wait} ms",
                        self.cfg.name,
                        attempt + 1
                    );
                    std::thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// How a scripted prompt is matched to a rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Contains(String),
    Suffix(String),
    /// The state a prompt was rendered for, recognised from its header line.
    State(State),
}

impl Matcher {
    pub fn matches(&self, prompt: &str) -> bool {
        match self {
            Matcher::Contains(s) => prompt.contains(s.as_str()),
            Matcher::Suffix(s) => prompt.ends_with(s.as_str()),
            Matcher::State(st) => crate::prompts::detect_state(prompt) == Some(*st),
        }
    }
}

/// How a rule picks among its responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pick {
    /// Consume in order; exhausted rules fail.
    #[default]
    Queue,
    /// Cycle in call order.
    Cycle,
    /// Choose by a hash of the prompt, independent of call order.
    Hash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub matcher: Matcher,
    pub responses: Vec<String>,
}

/// Serializable description of a scripted backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptSpec {
    Sequence(Vec<String>),
    Keyed {
        rules: Vec<ScriptRule>,
        #[serde(default)]
        pick: Pick,
    },
}

#[derive(Debug)]
enum Script {
    Sequence(VecDeque<String>),
    Keyed {
        rules: Vec<ScriptRule>,
        cursors: Vec<usize>,
        pick: Pick,
    },
}

/// Deterministic backend replaying canned responses.
#[derive(Debug)]
pub struct ScriptedBackend {
    name: String,
    script: Mutex<Script>,
    calls: Mutex<Vec<String>>,
}

impl ScriptedBackend {
    pub fn from_spec(name: &str, spec: ScriptSpec) -> Result<Self, BackendError> {
        let script = match spec {
            ScriptSpec::Sequence(items) => {
                if items.is_empty() {
                    return Err(BackendError::InvalidRequest("empty script".into()));
                }
                Script::Sequence(items.into())
            }
            ScriptSpec::Keyed { rules, pick } => {
                if rules.is_empty() || rules.iter().any(|r| r.responses.is_empty()) {
                    return Err(BackendError::InvalidRequest(
                        "keyed script needs non-empty rules".into(),
                    ));
                }
                let cursors = vec![0; rules.len()];
                Script::Keyed { rules, cursors, pick }
            }
        };
        Ok(ScriptedBackend {
            name: name.to_string(),
            script: Mutex::new(script),
            calls: Mutex::new(Vec::new()),
        })
    }

    /// Responses returned in order, one per call.
    pub fn sequence<S: Into<String>>(items: impl IntoIterator<Item = S>) -> Result<Self, BackendError> {
        Self::from_spec("scripted", ScriptSpec::Sequence(items.into_iter().map(Into::into).collect()))
    }

    /// Responses chosen by the first rule whose matcher accepts the prompt.
    pub fn keyed(rules: Vec<(Matcher, Vec<String>)>, pick: Pick) -> Result<Self, BackendError> {
        let rules = rules
            .into_iter()
            .map(|(matcher, responses)| ScriptRule { matcher, responses })
            .collect();
        Self::from_spec("scripted", ScriptSpec::Keyed { rules, pick })
    }

    /// Every prompt received so far.
    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }

    /// True when a sequence script has no responses left.
    pub fn is_exhausted(&self) -> bool {
        matches!(&*self.script.lock().unwrap(), Script::Sequence(q) if q.is_empty())
    }
}

/// 64-bit FNV-1a, stable across platforms and releases.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn exhausted(prompt: &str) -> BackendError {
    BackendError::ScriptExhausted {
        prompt_head: prompt.chars().take(60).collect(),
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete_raw(&self, prompt: &str, _dec: &DecodingParams) -> Result<CompletionResult, BackendError> {
        let started = Instant::now();
        self.calls.lock().unwrap().push(prompt.to_string());
        let mut script = self.script.lock().unwrap();
        let text = match &mut *script {
            Script::Sequence(q) => q.pop_front().ok_or_else(|| exhausted(prompt))?,
            Script::Keyed { rules, cursors, pick } => {
                let idx = rules
                    .iter()
                    .position(|r| r.matcher.matches(prompt))
                    .ok_or_else(|| exhausted(prompt))?;
                let responses = &rules[idx].responses;
                match pick {
                    Pick::Queue => {
                        let c = cursors[idx];
                        cursors[idx] += 1;
                        responses.get(c).cloned().ok_or_else(|| exhausted(prompt))?
                    }
                    Pick::Cycle => {
                        let c = cursors[idx];
                        cursors[idx] += 1;
                        responses[c % responses.len()].clone()
                    }
                    Pick::Hash => {
                        let h = stable_hash(prompt.as_bytes());
                        responses[(h % responses.len() as u64) as usize].clone()
                    }
                }
            }
        };
        Ok(CompletionResult {
            text,
            usage: None,
            latency: started.elapsed(),
        })
    }
}

type CompletionFn = dyn Fn(&str, &DecodingParams) -> Result<String, BackendError> + Send + Sync;

/// Backend whose output is computed by a closure.
pub struct FnBackend {
    name: String,
    f: Box<CompletionFn>,
}

impl FnBackend {
    pub fn new<F>(name: &str, f: F) -> Self
    where
        F: Fn(&str, &DecodingParams) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        FnBackend {
            name: name.to_string(),
            f: Box::new(f),
        }
    }
}

impl Backend for FnBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete_raw(&self, prompt: &str, dec: &DecodingParams) -> Result<CompletionResult, BackendError> {
        let started = Instant::now();
        let text = (self.f)(prompt, dec)?;
        Ok(CompletionResult {
            text,
            usage: None,
            latency: started.elapsed(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_mock_returns_text() {
        let b = FnBackend::new("echo", |_, _| Ok("X".into()));
        let r = b.complete("p", &DecodingParams::greedy(8)).unwrap();
        assert_eq!(r.text, "X");
    }

    #[test]
    fn stop_sequences_truncate_client_side() {
        let b = FnBackend::new("m", |_, _| Ok("ans\nUser: next".into()));
        let dec = DecodingParams::greedy(8).with_stops(["\nUser:"]);
        assert_eq!(b.complete("p", &dec).unwrap().text, "ans");
    }

    #[test]
    fn earliest_stop_wins() {
        let stops = vec!["B".to_string(), "A".to_string()];
        assert_eq!(apply_stop_sequences("xxAyyB", &stops), "xx");
        assert_eq!(apply_stop_sequences("plain", &[]), "plain");
    }

    #[test]
    fn empty_prompt_is_rejected() {
        let b = FnBackend::new("m", |_, _| Ok("x".into()));
        assert!(matches!(
            b.complete("", &DecodingParams::greedy(4)),
            Err(BackendError::InvalidRequest(_))
        ));
    }

    #[test]
    fn greedy_serializes_as_temperature_zero() {
        let dec = DecodingParams::greedy(16);
        let a = serde_json::to_vec(&CompletionRequest::new("m", "hello", &dec)).unwrap();
        let b = serde_json::to_vec(&CompletionRequest::new("m", "hello", &dec)).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            String::from_utf8(a).unwrap(),
            r#"{"model":"m","prompt":"hello","max_tokens":16,"temperature":0.0,"top_p":1.0,"stop":[]}"#
        );
    }

    #[test]
    fn nucleus_validation() {
        assert!(DecodingParams::nucleus(0.9, 10).validate().is_ok());
        assert!(DecodingParams::nucleus(0.0, 10).validate().is_err());
        assert!(DecodingParams::nucleus(1.5, 10).validate().is_err());
        let mut greedy = DecodingParams::greedy(10);
        greedy.top_p = 7.0;
        assert!(greedy.validate().is_ok());
    }

    #[test]
    fn sequence_script_is_consumed_then_exhausted() {
        let b = ScriptedBackend::sequence(["a", "b"]).unwrap();
        let d = DecodingParams::greedy(4);
        assert_eq!(b.complete("p", &d).unwrap().text, "a");
        assert_eq!(b.complete("p", &d).unwrap().text, "b");
        assert!(b.is_exhausted());
        assert!(matches!(b.complete("p", &d), Err(BackendError::ScriptExhausted { .. })));
        assert_eq!(b.call_count(), 3);
    }

    #[test]
    fn keyed_script_matches_patterns() {
        let b = ScriptedBackend::keyed(
            vec![
                (Matcher::Contains("answerable or unanswerable".into()), vec!["unanswerable".into()]),
                (Matcher::Suffix("Agent:".into()), vec!["fine".into()]),
            ],
            Pick::Cycle,
        )
        .unwrap();
        let d = DecodingParams::greedy(4);
        assert_eq!(b.complete("Is it answerable or unanswerable?", &d).unwrap().text, "unanswerable");
        assert_eq!(b.complete("User: hi\nAgent:", &d).unwrap().text, "fine");
        assert!(b.complete("nothing matches", &d).is_err());
    }

    #[test]
    fn hash_pick_ignores_call_order() {
        let mk = || {
            ScriptedBackend::keyed(
                vec![(Matcher::Contains(String::new()), vec!["x".into(), "y".into(), "z".into()])],
                Pick::Hash,
            )
            .unwrap()
        };
        let d = DecodingParams::greedy(4);
        let (a, b) = (mk(), mk());
        let fwd: Vec<String> = ["p1", "p2", "p3"].iter().map(|p| a.complete(p, &d).unwrap().text).collect();
        let mut rev: Vec<String> = ["p3", "p2", "p1"].iter().map(|p| b.complete(p, &d).unwrap().text).collect();
        rev.reverse();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn empty_script_is_rejected() {
        assert!(ScriptedBackend::sequence(Vec::<String>::new()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(BackendConfig::new("a", "http://localhost:8000/v1/completions", "m").validate().is_ok());
        assert!(BackendConfig::new("a", "not a url", "m").validate().is_err());
        assert!(BackendConfig::new("a", "ftp://x/y", "m").validate().is_err());
    }

    #[test]
    fn transient_classification() {
        assert!(BackendError::HttpStatus { code: 429, body: String::new() }.is_transient());
        assert!(BackendError::HttpStatus { code: 503, body: String::new() }.is_transient());
        assert!(!BackendError::HttpStatus { code: 400, body: String::new() }.is_transient());
        assert!(!BackendError::MalformedResponse(String::new()).is_transient());
    }
}
