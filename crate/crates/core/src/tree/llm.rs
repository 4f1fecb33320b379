//! Tree extraction by an analysis model, with a bounded repair loop.
//!
//! The model is asked for `{"nodes": [...], "edges": [...]}`. Output that
//! fails to parse or validate is sent back with the violation list, up to
//! `max_repairs` times.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{validate_tree, Generator, ReasoningEdge, ReasoningNode, ReasoningTree, TreeError, ValidationReport};
use crate::model::{transcript_hash, Message, Role, SessionId};
use crate::providers::{ChatProvider, ModelConfig};

pub const PROMPT_VERSION: &str = "tree_extraction_v1";
pub const PROMPT_TEMPLATE: &str = include_str!("../../assets/tree_extraction_v1.txt");
pub const DEFAULT_MAX_REPAIRS: u32 = 2;

/// One request/response exchange with the analysis model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmAttempt {
    pub attempt: u32,
    pub response: String,
    /// Parse error or rendered violations; empty when the attempt succeeded.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

#[derive(Deserialize)]
struct Document {
    #[serde(default)]
    nodes: Vec<ReasoningNode>,
    #[serde(default)]
    edges: Vec<ReasoningEdge>,
}

pub fn render_transcript(messages: &[Message]) -> String {
    let mut out = String::new();
    for (i, m) in messages.iter().enumerate() {
        out.push_str(&format!("[{i}] {}:\n{}\n\n", m.role.as_str(), m.content));
    }
    out
}

/// The outermost `{...}` of a reply, tolerating code fences and chatter.
fn json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| &text[start..=end])
}

fn parse_document(text: &str) -> Result<Document, String> {
    let body = json_object(text).ok_or_else(|| "response contains no JSON object".to_string())?;
    let v: Value = serde_json::from_str(body).map_err(|e| format!("invalid JSON: {e}"))?;
    serde_json::from_value(v).map_err(|e| format!("JSON does not match the node/edge format: {e}"))
}

fn conversation(turns: &[(Role, String)]) -> Vec<Message> {
    turns.iter().enumerate().map(|(i, (r, c))| Message::new(i as u64, *r, c.clone())).collect()
}

/// Runs the extraction. Fails with `ExtractionFailed` after
/// `1 + max_repairs` unusable responses; provider failures are returned as
/// they happen.
pub fn generate_tree_llm(
    provider: &dyn ChatProvider,
    config: &ModelConfig,
    session_id: &SessionId,
    messages: &[Message],
    max_repairs: u32,
) -> Result<ReasoningTree, TreeError> {
    let source_hash = transcript_hash(messages);
    let mut turns = vec![(Role::System, PROMPT_TEMPLATE.to_string()), (Role::User, render_transcript(messages))];
    let mut attempts = Vec::new();
    let mut last_report = ValidationReport::default();

    for attempt in 1..=max_repairs + 1 {
        let reply = provider.complete(config, &conversation(&turns)).map_err(TreeError::Provider)?;
        let (errors, repair) = match parse_document(&reply.content) {
            Err(e) => {
                last_report = ValidationReport::default();
                (vec![e.clone()], format!("Your reply could not be used: {e}\nReturn only the JSON object."))
            }
            Ok(doc) => {
                let mut tree = ReasoningTree::empty(session_id.clone(), Generator::Llm, source_hash);
                tree.nodes = doc.nodes;
                tree.edges = doc.edges;
                let report = validate_tree(&tree, messages);
                if report.ok {
                    attempts.push(LlmAttempt { attempt, response: reply.content, errors: Vec::new() });
                    tree.normalize();
                    tree.meta.insert("prompt_version".into(), PROMPT_VERSION.into());
                    tree.meta.insert("model_config_id".into(), config.id.clone().into());
                    tree.meta.insert("repairs".into(), (attempt - 1).into());
                    tree.meta.insert("attempts".into(), serde_json::to_value(&attempts).expect("serializable"));
                    return Ok(tree);
                }
                let rendered = report.render();
                let errors = rendered.lines().map(str::to_string).collect();
                last_report = report;
                (errors, format!("The graph violates these rules:\n{rendered}\nReturn the corrected JSON object only."))
            }
        };
        attempts.push(LlmAttempt { attempt, response: reply.content.clone(), errors });
        turns.push((Role::Assistant, reply.content));
        turns.push((Role::User, repair));
    }
    Err(TreeError::ExtractionFailed { attempts, report: last_report })
}
