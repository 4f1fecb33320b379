//! Benchmark plugin protocol.
//!
//! A benchmark is a pure environment: it produces the opening transcript
//! for an item, parses model replies into [`Action`]s, and reacts to each
//! action given the round history. Items are stored as JSON so plugins can
//! be held behind `dyn BenchmarkPlugin`.

pub mod deduction;

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{Message, Role, Score, SessionStatus};

pub use deduction::DeductionPlugin;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Query,
    Guess,
    Malformed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifier_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guessed_code: Option<Vec<u8>>,
    pub raw_text: String,
}

impl Action {
    pub fn query(k: usize) -> Self {
        Action { kind: ActionKind::Query, verifier_index: Some(k), guessed_code: None, raw_text: format!("QUERY {k}") }
    }

    pub fn guess(code: &[u8]) -> Self {
        let raw = format!("GUESS {}", join_digits(code, " "));
        Action { kind: ActionKind::Guess, verifier_index: None, guessed_code: Some(code.to_vec()), raw_text: raw }
    }

    pub fn malformed(raw: impl Into<String>) -> Self {
        Action { kind: ActionKind::Malformed, verifier_index: None, guessed_code: None, raw_text: raw.into() }
    }

    /// Canonical action line, `None` for malformed actions.
    pub fn format(&self) -> Option<String> {
        match self.kind {
            ActionKind::Query => self.verifier_index.map(|k| format!("QUERY {k}")),
            ActionKind::Guess => self.guessed_code.as_ref().map(|c| format!("GUESS {}", join_digits(c, " "))),
            ActionKind::Malformed => None,
        }
    }
}

pub fn join_digits(code: &[u8], sep: &str) -> String {
    code.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(sep)
}

/// History passed to `react`. `round` is the 1-based number of the action
/// being reacted to; `history` holds the earlier actions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoundState {
    pub round: u32,
    pub history: Vec<Action>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    Solved,
    WrongGuess,
    RoundLimit,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Reaction {
    Reply { text: String },
    Terminal { success: bool, reason: TerminalReason, text: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Feedback {
    pub verifier_index: usize,
    pub verdict: bool,
}

impl Feedback {
    pub fn new(verifier_index: usize, verdict: bool) -> Self {
        Feedback { verifier_index, verdict }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("verifier index {index} out of range (item has {count})")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("invalid item: {0}")]
    InvalidItem(String),
    #[error("session is not terminal")]
    SessionNotTerminal,
    #[error("item generation exhausted after {attempts} attempts")]
    GenerationExhausted { attempts: u32 },
    #[error("benchmark does not support {0}")]
    Unsupported(&'static str),
}

/// Candidate-elimination hook used by the reasoning-tree consistency check.
pub trait FeedbackOracle: Send + Sync {
    /// Whether `code` survives all of `feedback` for this item.
    fn is_consistent(&self, item: &Value, feedback: &[Feedback], code: &[u8]) -> Result<bool, BenchError>;

    fn candidate_count(&self, item: &Value, feedback: &[Feedback]) -> Result<usize, BenchError>;
}

pub trait BenchmarkPlugin: Send + Sync {
    fn id(&self) -> &str;
    fn version(&self) -> &str;
    fn description(&self) -> &str {
        ""
    }

    fn validate_item(&self, item: &Value) -> Result<(), BenchError>;
    fn initial_messages(&self, item: &Value) -> Result<Vec<(Role, String)>, BenchError>;
    fn parse_action(&self, assistant_text: &str) -> Action;
    fn react(&self, item: &Value, action: &Action, state: &RoundState) -> Result<Reaction, BenchError>;
    fn max_rounds(&self, item: &Value) -> Result<u32, BenchError>;
    fn score(&self, item: &Value, transcript: &[Message], status: SessionStatus) -> Result<Score, BenchError>;

    /// Item as shown to models and UI clients: secrets removed.
    fn redact_item(&self, item: &Value) -> Value {
        item.clone()
    }

    fn generate_item(&self, _id: &str, _seed: u64, _params: &Value) -> Result<Value, BenchError> {
        Err(BenchError::Unsupported("item generation"))
    }

    fn oracle(&self) -> Option<&dyn FeedbackOracle> {
        None
    }
}

pub type SharedPlugin = Arc<dyn BenchmarkPlugin>;

/// Actions parsed from every assistant message of a transcript, in order.
pub fn actions_in(plugin: &dyn BenchmarkPlugin, transcript: &[Message]) -> Vec<Action> {
    transcript
        .iter()
        .filter(|m| m.role == Role::Assistant)
        .map(|m| plugin.parse_action(&m.content))
        .collect()
}

fn verdict_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^\s*VERIFIER\s+(\d+)\s*:\s*(TRUE|FALSE)\s*$").expect("valid regex"))
}

/// `VERIFIER <k>: TRUE|FALSE` lines in a message.
pub fn parse_verdict_lines(content: &str) -> Vec<Feedback> {
    verdict_re()
        .captures_iter(content)
        .filter_map(|c| {
            let k = c[1].parse().ok()?;
            Some(Feedback::new(k, c[2].eq_ignore_ascii_case("TRUE")))
        })
        .collect()
}

/// Verdicts recorded by environment messages with index `< upto`.
pub fn feedback_in(transcript: &[Message], upto: usize) -> Vec<Feedback> {
    transcript
        .iter()
        .take(upto)
        .filter(|m| m.role == Role::Environment)
        .flat_map(|m| parse_verdict_lines(&m.content))
        .collect()
}

/// Registry of in-process plugins keyed by benchmark id.
#[derive(Clone, Default)]
pub struct PluginRegistry {
    plugins: BTreeMap<String, SharedPlugin>,
}

impl PluginRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding the built-in deduction benchmark.
    pub fn with_builtin() -> Self {
        let mut r = Self::new();
        r.register(Arc::new(DeductionPlugin::new()));
        r
    }

    pub fn register(&mut self, plugin: SharedPlugin) {
        self.plugins.insert(plugin.id().to_string(), plugin);
    }

    pub fn get(&self, id: &str) -> Option<SharedPlugin> {
        self.plugins.get(id).cloned()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SharedPlugin> {
        self.plugins.values()
    }
}
