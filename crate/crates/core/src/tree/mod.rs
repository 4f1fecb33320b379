//! Reasoning dependency graphs over session transcripts.
//!
//! Although called a tree, a [`ReasoningTree`] is a DAG: a step may depend
//! on several earlier steps, verdicts, or messages. Edges always point
//! forward in transcript order (`from` is the dependency, `to` the
//! dependent). Trees come from the annotation parser in [`extract`] or from
//! an analysis model via [`llm`], and are checked by [`validate`] and
//! [`consistency`].

pub mod consistency;
pub mod export;
pub mod extract;
pub mod llm;
pub mod validate;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{ContentHash, SessionId};
use crate::providers::ProviderError;

pub use consistency::{check_consistency, ConsistencyOutcome};
pub use export::{export_tree, import_tree_json, TreeFormat};
pub use extract::extract_tree_deterministic;
pub use llm::{generate_tree_llm, LlmAttempt, PROMPT_TEMPLATE, PROMPT_VERSION};
pub use validate::{validate_tree, ValidationReport, Violation, ViolationCode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Premise,
    Inference,
    Action,
    Verdict,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Premise => "premise",
            NodeKind::Inference => "inference",
            NodeKind::Action => "action",
            NodeKind::Verdict => "verdict",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimMode {
    Keep,
    Drop,
}

/// Machine-checkable assertion that a candidate is still possible (`keep`)
/// or already eliminated (`drop`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Claim {
    pub mode: ClaimMode,
    pub code: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningNode {
    pub id: String,
    pub kind: NodeKind,
    pub turn_index: usize,
    pub text: String,
    /// Character offsets `(start, end)` into the grounding message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claim: Option<Claim>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Uses,
    Contradicts,
    Revises,
}

impl Relation {
    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Uses => "uses",
            Relation::Contradicts => "contradicts",
            Relation::Revises => "revises",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReasoningEdge {
    pub from: String,
    pub to: String,
    pub relation: Relation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Deterministic,
    Llm,
}

impl Generator {
    pub fn as_str(self) -> &'static str {
        match self {
            Generator::Deterministic => "deterministic",
            Generator::Llm => "llm",
        }
    }
}

impl FromStr for Generator {
    type Err = TreeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "deterministic" => Ok(Generator::Deterministic),
            "llm" => Ok(Generator::Llm),
            other => Err(TreeError::UnknownGenerator(other.to_string())),
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagKind {
    UnsupportedStep,
    ContradictsFeedback,
    StaleDependency,
    DanglingReference,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Flag {
    pub node_id: String,
    pub kind: FlagKind,
    pub explanation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTree {
    pub session_id: SessionId,
    pub generator: Generator,
    pub nodes: Vec<ReasoningNode>,
    pub edges: Vec<ReasoningEdge>,
    pub generated_at: DateTime<Utc>,
    pub source_hash: ContentHash,
    #[serde(default)]
    pub flags: Vec<Flag>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, Value>,
}

impl ReasoningTree {
    pub fn empty(session_id: SessionId, generator: Generator, source_hash: ContentHash) -> Self {
        ReasoningTree {
            session_id,
            generator,
            nodes: Vec::new(),
            edges: Vec::new(),
            generated_at: Utc::now(),
            source_hash,
            flags: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn node(&self, id: &str) -> Option<&ReasoningNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Stable ordering: nodes by (turn, id), edges and flags lexicographically.
    pub fn normalize(&mut self) {
        self.nodes.sort_by(|a, b| (a.turn_index, &a.id).cmp(&(b.turn_index, &b.id)));
        self.edges.sort();
        self.edges.dedup();
        self.flags.sort();
        self.flags.dedup();
    }

    pub fn flagged(&self, node_id: &str) -> bool {
        self.flags.iter().any(|f| f.node_id == node_id)
    }

    /// Structural equality ignoring the generation timestamp.
    pub fn same_structure(&self, other: &ReasoningTree) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.normalize();
        b.normalize();
        a.generated_at = b.generated_at;
        a == b
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("unknown export format {0:?}")]
    UnknownFormat(String),
    #[error("unknown tree generator {0:?}")]
    UnknownGenerator(String),
    #[error("tree extraction failed after {} attempt(s)", attempts.len())]
    ExtractionFailed { attempts: Vec<LlmAttempt>, report: ValidationReport },
    #[error("tree document is invalid: {0}")]
    InvalidDocument(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}
