//! JSON application config with `${VAR}` interpolation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use groundconv::dataset::{ApproxTokenCounter, HttpTokenCounter, TokenCounter};
use groundconv::eval::RoundtripConfig;
use groundconv::prompts::PromptOptions;
use groundconv::{AlgorithmSpec, Backend, BackendConfig, ExemplarCounts, HttpBackend, RunConfig, ScriptSpec, ScriptedBackend};
use serde::Deserialize;
use serde_json::Value;

use crate::logging::LoggingBackend;
use crate::UsageError;

/// How one named backend is built.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Http(BackendConfig),
    Scripted { script: ScriptSpec },
}

/// Backend names per role. An unset role uses the backend named after it.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Roles {
    pub generator: Option<String>,
    pub assistant: Option<String>,
    pub reference: Option<String>,
    pub agent: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub seeds: Option<PathBuf>,
    pub passages: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub docs: Option<PathBuf>,
    pub refs: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub stopwords: Option<PathBuf>,
    /// Extra no-answer phrases besides `CANNOTANSWER`.
    pub no_answer_patterns: Vec<String>,
    /// Factual-consistency scorer used by `stats`.
    pub consistency_url: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Prompts above this many tokens drop exemplars from the front.
    pub token_budget: Option<usize>,
    pub tokenizer_url: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub max_input_tokens: usize,
    pub origin_dataset: String,
    pub tokenizer_url: Option<String>,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            max_input_tokens: 1920,
            origin_dataset: "synthetic".into(),
            tokenizer_url: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub backends: BTreeMap<String, BackendSpec>,
    pub roles: Roles,
    /// Default algorithm id for `generate`.
    pub algorithm: Option<String>,
    /// Custom algorithms, looked up before the presets.
    pub algorithms: Vec<AlgorithmSpec>,
    pub run: RunConfig,
    pub eval: Option<RoundtripConfig>,
    pub paths: Paths,
    pub metrics: MetricsConfig,
    pub exemplar_counts: ExemplarCounts,
    pub prompts: PromptConfig,
    pub sft: SftConfig,
    /// Keep prompt/completion exchanges in generated traces.
    pub keep_exchanges: bool,
}

/// Replaces every `${NAME}` in string values with the environment variable
/// `NAME`. `$$` is a literal `$`.
pub fn interpolate(value: &mut Value) -> Result<()> {
    match value {
        Value::String(s) => *s = interpolate_str(s)?,
        Value::Array(items) => items.iter_mut().try_for_each(interpolate)?,
        Value::Object(map) => map.values_mut().try_for_each(interpolate)?,
        _ => {}
    }
    Ok(())
}

fn interpolate_str(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(pos) = rest.find('$') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix("$$") {
            out.push('$');
            rest = after;
        } else if let Some(body) = tail.strip_prefix("${") {
            let end = body
                .find('}')
                .ok_or_else(|| UsageError(format!("unterminated ${{ in config value {s:?}")))?;
            let name = &body[..end];
            let v = std::env::var(name)
                .map_err(|_| UsageError(format!("config references unset environment variable {name}")))?;
            out.push_str(&v);
            rest = &body[end + 1..];
        } else {
            out.push('$');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<AppConfig> {
        let Some(path) = path else {
            return Ok(AppConfig::default());
        };
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut value: Value = serde_json::from_str(&raw)
            .map_err(|e| UsageError(format!("config {} is not valid JSON: {e}", path.display())))?;
        interpolate(&mut value)?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<AppConfig> {
        let mut cfg: AppConfig =
            serde_json::from_value(value).map_err(|e| UsageError(format!("invalid config: {e}")))?;
        for (name, spec) in cfg.backends.iter_mut() {
            if let BackendSpec::Http(c) = spec {
                if c.name.is_empty() {
                    c.name = name.clone();
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (role, name) in self.role_bindings() {
            if let Some(n) = name {
                if !self.backends.contains_key(n) {
                    return Err(UsageError(format!("role {role} refers to unknown backend {n}")).into());
                }
            }
        }
        for spec in self.backends.values() {
            if let BackendSpec::Http(c) = spec {
                c.validate().map_err(UsageError)?;
            }
        }
        for a in &self.algorithms {
            a.validate().map_err(|e| UsageError(format!("algorithm {}: {e}", a.id)))?;
        }
        self.run.validate().map_err(|e| UsageError(e.to_string()))?;
        let p = &self.paths;
        let all = [&p.seeds, &p.passages, &p.data, &p.docs, &p.refs, &p.out];
        let set: Vec<&PathBuf> = all.iter().filter_map(|x| x.as_ref()).collect();
        for (i, a) in set.iter().enumerate() {
            if set[i + 1..].contains(a) {
                return Err(UsageError(format!("path {} is used twice in config", a.display())).into());
            }
        }
        Ok(())
    }

    fn role_bindings(&self) -> [(&'static str, Option<&String>); 4] {
        let r = &self.roles;
        [
            ("generator", r.generator.as_ref()),
            ("assistant", r.assistant.as_ref()),
            ("reference", r.reference.as_ref()),
            ("agent", r.agent.as_ref()),
        ]
    }

    /// Name of the backend bound to `role`.
    pub fn role_backend_name(&self, role: &str) -> String {
        self.role_bindings()
            .into_iter()
            .find(|(r, _)| *r == role)
            .and_then(|(_, n)| n.cloned())
            .unwrap_or_else(|| role.to_string())
    }

    /// Builds the backend named `name`, wrapped for call logging if asked.
    pub fn build_backend(&self, name: &str, verbose: bool) -> Result<Arc<dyn Backend>> {
        let spec = self
            .backends
            .get(name)
            .ok_or_else(|| UsageError(format!("no backend named {name} in config")))?;
        let backend: Arc<dyn Backend> = match spec {
            BackendSpec::Http(c) => Arc::new(
                HttpBackend::new(c.clone()).map_err(|e| UsageError(format!("backend {name}: {e}")))?,
            ),
            BackendSpec::Scripted { script } => Arc::new(
                ScriptedBackend::from_spec(name, script.clone()).map_err(|e| UsageError(format!("backend {name}: {e}")))?,
            ),
        };
        Ok(if verbose { Arc::new(LoggingBackend::new(backend)) } else { backend })
    }

    pub fn role_backend(&self, role: &str, verbose: bool) -> Result<Arc<dyn Backend>> {
        self.build_backend(&self.role_backend_name(role), verbose)
    }

    pub fn algorithm(&self, id: &str) -> Result<AlgorithmSpec> {
        self.algorithms
            .iter()
            .find(|a| a.id == id)
            .cloned()
            .or_else(|| AlgorithmSpec::preset(id))
            .ok_or_else(|| {
                let known: Vec<String> = AlgorithmSpec::presets()
                    .into_iter()
                    .chain(self.algorithms.iter().cloned())
                    .map(|a| a.id)
                    .collect();
                UsageError(format!("unknown algorithm {id}; known: {}", known.join(", "))).into()
            })
    }

    pub fn prompt_options(&self) -> Result<PromptOptions> {
        Ok(PromptOptions {
            token_budget: match self.prompts.token_budget {
                Some(n) => Some((n, token_counter(self.prompts.tokenizer_url.as_deref())?)),
                None => None,
            },
        })
    }
}

/// An exact counter when a tokenizer endpoint is given, else the approximation.
pub fn token_counter(url: Option<&str>) -> Result<Arc<dyn TokenCounter>> {
    Ok(match url {
        Some(u) => Arc::new(HttpTokenCounter::new(u, Duration::from_secs(30))?),
        None => Arc::new(ApproxTokenCounter),
    })
}
