use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use serde_json::{json, Map, Value};

use super::{to_wire_messages, CallLimiter, ChatProvider, CompletionResult, ModelConfig, ProviderError, ProviderSpec};
use crate::model::Message;

/// Client for `{base_url}/chat/completions` servers (hosted APIs and local
/// model servers alike). Requests are non-streaming.
pub struct HttpProvider {
    endpoint: String,
    auth_ref: Option<String>,
    timeout: Duration,
    max_retries: u32,
    backoff_base: Duration,
    limiter: Arc<CallLimiter>,
    client: OnceLock<reqwest::blocking::Client>,
    calls: AtomicU64,
}

/// One failed attempt, before retry policy is applied.
enum AttemptError {
    Transport(String),
    Timeout(String),
    Fatal(ProviderError),
}

impl HttpProvider {
    pub fn new(spec: &ProviderSpec, limiter: Arc<CallLimiter>) -> Result<Self, ProviderError> {
        let base = spec
            .base_url
            .as_deref()
            .ok_or_else(|| ProviderError::Validation("base_url required".into()))?;
        Ok(HttpProvider {
            endpoint: format!("{}/chat/completions", base.trim_end_matches('/')),
            auth_ref: spec.auth_ref.clone(),
            timeout: Duration::from_millis(spec.timeout_ms),
            max_retries: spec.max_retries,
            backoff_base: Duration::from_millis(100),
            limiter,
            client: OnceLock::new(),
            calls: AtomicU64::new(0),
        })
    }

    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn client(&self) -> &reqwest::blocking::Client {
        self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(self.timeout)
                .build()
                .expect("http client builds")
        })
    }

    fn attempt(&self, body: &Value) -> Result<(Value, u64), AttemptError> {
        let _permit = self.limiter.acquire();
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut req = self.client().post(&self.endpoint).json(body);
        if let Some(var) = &self.auth_ref {
            match std::env::var(var) {
                Ok(token) => req = req.bearer_auth(token),
                Err(_) => tracing::warn!(auth_ref = %var, "credential variable is not set; sending without auth"),
            }
        }
        let started = Instant::now();
        let resp = req.send().map_err(classify)?;
        let status = resp.status();
        let text = resp.text().map_err(classify)?;
        let latency = started.elapsed().as_millis() as u64;
        if status.is_client_error() {
            return Err(AttemptError::Fatal(ProviderError::Rejected { status: status.as_u16(), body: text }));
        }
        if !status.is_success() {
            return Err(AttemptError::Transport(format!("HTTP {}: {}", status.as_u16(), text)));
        }
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| AttemptError::Fatal(ProviderError::Malformed(format!("response is not JSON: {e}"))))?;
        Ok((v, latency))
    }
}

fn classify(e: reqwest::Error) -> AttemptError {
    if e.is_timeout() {
        AttemptError::Timeout(e.to_string())
    } else {
        AttemptError::Transport(e.to_string())
    }
}

/// Request body: model name, messages, and sampling parameters only.
pub(crate) fn request_body(config: &ModelConfig, transcript: &[Message]) -> Value {
    let mut body = Map::new();
    body.insert("model".into(), json!(config.model_name));
    body.insert("messages".into(), serde_json::to_value(to_wire_messages(transcript)).expect("serializes"));
    body.insert("temperature".into(), json!(config.temperature));
    body.insert("top_p".into(), json!(config.top_p));
    body.insert("max_tokens".into(), json!(config.max_tokens));
    for (k, v) in &config.extra_params {
        body.entry(k.clone()).or_insert_with(|| v.clone());
    }
    Value::Object(body)
}

pub(crate) fn parse_response(v: &Value, latency_ms: u64) -> Result<CompletionResult, ProviderError> {
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| ProviderError::Malformed("missing choices[0].message.content".into()))?;
    let mut meta = BTreeMap::new();
    meta.insert("latency_ms".into(), latency_ms.to_string());
    if let Some(n) = v.pointer("/usage/prompt_tokens").and_then(Value::as_u64) {
        meta.insert("prompt_tokens".into(), n.to_string());
    }
    if let Some(n) = v.pointer("/usage/completion_tokens").and_then(Value::as_u64) {
        meta.insert("completion_tokens".into(), n.to_string());
    }
    if let Some(id) = v.get("id").and_then(Value::as_str) {
        meta.insert("request_id".into(), id.to_string());
    }
    Ok(CompletionResult { content: content.to_string(), meta })
}

impl ChatProvider for HttpProvider {
    fn complete(&self, config: &ModelConfig, transcript: &[Message]) -> Result<CompletionResult, ProviderError> {
        if transcript.is_empty() {
            return Err(ProviderError::Validation("transcript must not be empty".into()));
        }
        let body = request_body(config, transcript);
        let attempts = self.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff_base * 2u32.saturating_pow(attempt - 1));
            }
            match self.attempt(&body) {
                Ok((v, latency)) => {
                    let mut res = parse_response(&v, latency)?;
                    res.meta.insert("attempts".into(), (attempt + 1).to_string());
                    return Ok(res);
                }
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Transport(m)) | Err(AttemptError::Timeout(m)) => {
                    tracing::debug!(attempt, error = %m, "chat completion attempt failed");
                    last_error = m;
                }
            }
        }
        Err(ProviderError::Unavailable { attempts, last_error })
    }

    fn complete_once(&self, config: &ModelConfig, transcript: &[Message]) -> Result<CompletionResult, ProviderError> {
        let body = request_body(config, transcript);
        match self.attempt(&body) {
            Ok((v, latency)) => parse_response(&v, latency),
            Err(AttemptError::Fatal(e)) => Err(e),
            Err(AttemptError::Timeout(m)) => Err(ProviderError::Timeout(m)),
            Err(AttemptError::Transport(m)) => Err(ProviderError::Unavailable { attempts: 1, last_error: m }),
        }
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}
