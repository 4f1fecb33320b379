use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize};

use super::{ChatProvider, CompletionResult, ModelConfig, ProviderError};
use crate::model::{transcript_hash, Message, Role};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// Matches the n-th model turn of a transcript (1-based), i.e. one more
    /// than the number of assistant messages already present.
    NthCall,
    /// Matches the hex transcript digest exactly.
    TranscriptHash,
    /// Matches when the regex finds a hit in the latest message's content.
    ContentRegex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub matcher: Matcher,
    #[serde(deserialize_with = "string_or_number")]
    pub matcher_arg: String,
    pub response_text: String,
}

fn string_or_number<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    match serde_json::Value::deserialize(d)? {
        serde_json::Value::String(s) => Ok(s),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!("matcher_arg must be a string or number, got {other}"))),
    }
}

impl ScriptRule {
    pub fn nth(n: u64, response: impl Into<String>) -> Self {
        ScriptRule { matcher: Matcher::NthCall, matcher_arg: n.to_string(), response_text: response.into() }
    }

    pub fn regex(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        ScriptRule { matcher: Matcher::ContentRegex, matcher_arg: pattern.into(), response_text: response.into() }
    }

    pub fn transcript(hash_hex: impl Into<String>, response: impl Into<String>) -> Self {
        ScriptRule { matcher: Matcher::TranscriptHash, matcher_arg: hash_hex.into(), response_text: response.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptedBehavior {
    pub id: String,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    pub default_response: String,
    /// Artificial latency per call.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub delay_ms: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

impl ScriptedBehavior {
    pub fn new(id: impl Into<String>, default_response: impl Into<String>) -> Self {
        ScriptedBehavior { id: id.into(), rules: Vec::new(), default_response: default_response.into(), delay_ms: 0 }
    }

    pub fn rule(mut self, rule: ScriptRule) -> Self {
        self.rules.push(rule);
        self
    }

    /// Turn-indexed script: the i-th response answers model turn i+1.
    pub fn sequence(id: impl Into<String>, responses: &[&str], default_response: impl Into<String>) -> Self {
        let mut b = ScriptedBehavior::new(id, default_response);
        for (i, r) in responses.iter().enumerate() {
            b.rules.push(ScriptRule::nth(i as u64 + 1, *r));
        }
        b
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ProviderError::Validation(format!("reading script file: {e}")))?;
        serde_json::from_str(&text).map_err(|e| ProviderError::Validation(format!("parsing script file: {e}")))
    }
}

enum CompiledMatcher {
    Nth(u64),
    Hash(String),
    Regex(Regex),
}

/// Deterministic rule-table provider. The first matching rule wins; the
/// reply depends only on the transcript.
pub struct ScriptedProvider {
    behavior: ScriptedBehavior,
    compiled: Vec<CompiledMatcher>,
    calls: AtomicU64,
}

impl ScriptedProvider {
    pub fn new(behavior: ScriptedBehavior) -> Result<Self, ProviderError> {
        let compiled = behavior
            .rules
            .iter()
            .map(|r| match r.matcher {
                Matcher::NthCall => r
                    .matcher_arg
                    .trim()
                    .parse::<u64>()
                    .map(CompiledMatcher::Nth)
                    .map_err(|_| ProviderError::Validation(format!("nth_call arg {:?} is not an integer", r.matcher_arg))),
                Matcher::TranscriptHash => Ok(CompiledMatcher::Hash(r.matcher_arg.trim().to_ascii_lowercase())),
                Matcher::ContentRegex => Regex::new(&r.matcher_arg)
                    .map(CompiledMatcher::Regex)
                    .map_err(|e| ProviderError::Validation(format!("bad content_regex: {e}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ScriptedProvider { behavior, compiled, calls: AtomicU64::new(0) })
    }

    pub fn behavior(&self) -> &ScriptedBehavior {
        &self.behavior
    }

    /// Index of the matching rule, `None` for the default response.
    pub fn select(&self, transcript: &[Message]) -> Option<usize> {
        let turn = 1 + transcript.iter().filter(|m| m.role == Role::Assistant).count() as u64;
        let hash = transcript_hash(transcript).to_hex();
        let latest = transcript.last().map(|m| m.content.as_str()).unwrap_or("");
        self.compiled.iter().position(|m| match m {
            CompiledMatcher::Nth(n) => *n == turn,
            CompiledMatcher::Hash(h) => *h == hash,
            CompiledMatcher::Regex(re) => re.is_match(latest),
        })
    }
}

impl ChatProvider for ScriptedProvider {
    fn complete(&self, _config: &ModelConfig, transcript: &[Message]) -> Result<CompletionResult, ProviderError> {
        if transcript.is_empty() {
            return Err(ProviderError::Validation("transcript must not be empty".into()));
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.behavior.delay_ms > 0 {
            std::thread::sleep(std::time::Duration::from_millis(self.behavior.delay_ms));
        }
        let chosen = self.select(transcript);
        let content = match chosen {
            Some(i) => self.behavior.rules[i].response_text.clone(),
            None => self.behavior.default_response.clone(),
        };
        let mut meta = BTreeMap::new();
        meta.insert("latency_ms".into(), self.behavior.delay_ms.to_string());
        meta.insert("provider".into(), "scripted".into());
        meta.insert("script_rule".into(), chosen.map_or("default".into(), |i| i.to_string()));
        Ok(CompletionResult { content, meta })
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}
