//! Chat-completion providers.
//!
//! Every model source sits behind [`ChatProvider`]: remote or local servers
//! speaking the open chat-completion JSON protocol ([`HttpProvider`]) and the
//! rule-table [`ScriptedProvider`] that keeps tests offline and
//! deterministic. Providers never touch the store.

mod http;
mod limit;
mod scripted;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{Message, Role};

pub use http::HttpProvider;
pub use limit::CallLimiter;
pub use scripted::{Matcher, ScriptRule, ScriptedBehavior, ScriptedProvider};

/// Prefix line for environment messages, which the wire protocol has no role for.
pub const ENVIRONMENT_PREFIX: &str = "[ENVIRONMENT]";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    ChatCompletionHttp,
    Scripted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderSpec {
    pub id: String,
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    /// Name of the environment variable holding the bearer credential.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_ref: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Rule table for `scripted` providers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<ScriptedBehavior>,
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_max_retries() -> u32 {
    2
}

pub const MAX_RETRIES_LIMIT: u32 = 10;

fn is_env_var_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl ProviderSpec {
    pub fn scripted(id: impl Into<String>, script: ScriptedBehavior) -> Self {
        ProviderSpec {
            id: id.into(),
            kind: ProviderKind::Scripted,
            base_url: None,
            auth_ref: None,
            timeout_ms: default_timeout_ms(),
            max_retries: 0,
            script: Some(script),
        }
    }

    pub fn http(id: impl Into<String>, base_url: impl Into<String>) -> Self {
        ProviderSpec {
            id: id.into(),
            kind: ProviderKind::ChatCompletionHttp,
            base_url: Some(base_url.into()),
            auth_ref: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            script: None,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        let bad = |m: String| Err(ProviderError::Validation(m));
        if self.id.trim().is_empty() {
            return bad("provider id must not be empty".into());
        }
        if self.timeout_ms == 0 {
            return bad("timeout_ms must be positive".into());
        }
        if self.max_retries > MAX_RETRIES_LIMIT {
            return bad(format!("max_retries must be at most {MAX_RETRIES_LIMIT}"));
        }
        if let Some(a) = &self.auth_ref {
            if !is_env_var_name(a) {
                return bad("auth_ref must be an environment variable name, not a credential".into());
            }
        }
        match self.kind {
            ProviderKind::ChatCompletionHttp => {
                let Some(url) = &self.base_url else {
                    return bad("chat_completion_http providers need a base_url".into());
                };
                match reqwest::Url::parse(url) {
                    Ok(u) if u.scheme() == "http" || u.scheme() == "https" => {}
                    _ => return bad(format!("base_url {url:?} is not an http(s) URL")),
                }
            }
            ProviderKind::Scripted => {
                let Some(script) = &self.script else {
                    return bad("scripted providers need a script".into());
                };
                ScriptedProvider::new(script.clone())?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub id: String,
    pub provider_id: String,
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra_params: BTreeMap<String, Value>,
}

fn default_top_p() -> f64 {
    1.0
}

fn default_max_tokens() -> u32 {
    1024
}

impl ModelConfig {
    /// Reproducible analysis defaults: temperature 0, top_p 1.
    pub fn new(id: impl Into<String>, provider_id: impl Into<String>, model_name: impl Into<String>) -> Self {
        ModelConfig {
            id: id.into(),
            provider_id: provider_id.into(),
            model_name: model_name.into(),
            temperature: 0.0,
            top_p: default_top_p(),
            max_tokens: default_max_tokens(),
            extra_params: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        let bad = |m: &str| Err(ProviderError::Validation(m.to_string()));
        if self.id.trim().is_empty() {
            return bad("model config id must not be empty");
        }
        if self.model_name.trim().is_empty() {
            return bad("model_name must not be empty");
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be a finite value >= 0");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must lie in (0, 1]");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        if self.extra_params.values().any(|v| v.is_object() || v.is_array()) {
            return bad("extra_params values must be scalars");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub content: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("provider timed out: {0}")]
    Timeout(String),
    #[error("provider rejected the request (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("provider unavailable after {attempts} attempt(s): {last_error}")]
    Unavailable { attempts: u32, last_error: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("invalid provider configuration: {0}")]
    Validation(String),
}

/// One chat-completion source. Implementations must be safe to call
/// concurrently and must not mutate the store.
pub trait ChatProvider: Send + Sync {
    fn complete(&self, config: &ModelConfig, transcript: &[Message]) -> Result<CompletionResult, ProviderError>;

    /// Single attempt, no retries. Used by health probes.
    fn complete_once(&self, config: &ModelConfig, transcript: &[Message]) -> Result<CompletionResult, ProviderError> {
        self.complete(config, transcript)
    }

    /// Number of completion calls served so far.
    fn calls(&self) -> u64;
}

pub type SharedProvider = Arc<dyn ChatProvider>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireMessage {
    pub role: String,
    pub content: String,
}

/// Maps transcript roles onto the wire protocol's system/user/assistant.
pub fn to_wire_messages(transcript: &[Message]) -> Vec<WireMessage> {
    transcript
        .iter()
        .map(|m| match m.role {
            Role::Environment => WireMessage {
                role: "user".into(),
                content: format!("{ENVIRONMENT_PREFIX}\n{}", m.content),
            },
            r => WireMessage { role: r.as_str().into(), content: m.content.clone() },
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthReport {
    pub provider_id: String,
    pub ok: bool,
    pub latency_ms: u64,
    /// Error class (e.g. `provider_unavailable`) when `ok` is false.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl ProviderError {
    pub fn class(&self) -> &'static str {
        match self {
            ProviderError::Timeout(_) => "provider_timeout",
            ProviderError::Rejected { .. } => "provider_rejected",
            ProviderError::Unavailable { .. } => "provider_unavailable",
            ProviderError::Malformed(_) => "malformed_provider_response",
            ProviderError::Validation(_) => "validation_error",
        }
    }
}

/// Issues a minimal one-message completion and reports latency or the error class.
pub fn probe(provider: &dyn ChatProvider, provider_id: &str, config: &ModelConfig) -> HealthReport {
    let ping = [Message::new(0, Role::User, "ping")];
    let started = std::time::Instant::now();
    let res = provider.complete_once(config, &ping);
    let latency_ms = started.elapsed().as_millis() as u64;
    match res {
        Ok(_) => HealthReport { provider_id: provider_id.into(), ok: true, latency_ms, error: None, message: None },
        Err(e) => HealthReport {
            provider_id: provider_id.into(),
            ok: false,
            latency_ms,
            error: Some(e.class().into()),
            message: Some(e.to_string()),
        },
    }
}

/// Builds the provider client for a spec.
pub fn build_provider(spec: &ProviderSpec, limiter: Arc<CallLimiter>) -> Result<SharedProvider, ProviderError> {
    spec.validate()?;
    Ok(match spec.kind {
        ProviderKind::Scripted => Arc::new(ScriptedProvider::new(spec.script.clone().expect("validated"))?),
        ProviderKind::ChatCompletionHttp => Arc::new(HttpProvider::new(spec, limiter)?),
    })
}
