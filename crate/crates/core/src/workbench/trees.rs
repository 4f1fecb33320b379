use serde_json::json;

use super::{decode, encode, Result, Workbench, WorkbenchError};
use crate::model::{transcript_hash, AuditKind, SessionId};
use crate::store::{Collection, WriteOp};
use crate::tree::{check_consistency, extract_tree_deterministic, generate_tree_llm, Generator, ReasoningTree};

#[derive(Clone, Debug, PartialEq)]
pub struct TreeRequest {
    pub generator: Generator,
    /// Model config for the `llm` generator; the session's own model when absent.
    pub analysis_model: Option<String>,
    /// Regenerate even when the stored tree matches the transcript.
    pub force: bool,
}

impl TreeRequest {
    pub fn new(generator: Generator) -> Self {
        TreeRequest { generator, analysis_model: None, force: false }
    }
}

fn tree_key(id: &SessionId, generator: Generator) -> String {
    format!("{id}/{generator}")
}

impl Workbench {
    /// Stored tree, if it still matches the transcript.
    pub fn get_tree(&self, id: &SessionId, generator: Generator) -> Result<ReasoningTree> {
        let (session, _) = self.load_session(id)?;
        let rec = self.store.get(Collection::Trees, &tree_key(id, generator))?.ok_or_else(|| {
            WorkbenchError::TreeNotFound { session: id.to_string(), generator: generator.to_string() }
        })?;
        let tree: ReasoningTree = decode(&rec)?;
        if tree.source_hash != session.transcript_hash() {
            return Err(WorkbenchError::StaleTree { session: id.to_string(), generator: generator.to_string() });
        }
        Ok(tree)
    }

    /// Builds, checks and stores a tree. A stored tree with the current
    /// source hash is returned as is unless `force` is set, so repeated
    /// calls on an unchanged transcript make no provider calls.
    pub fn generate_tree(&self, id: &SessionId, req: &TreeRequest) -> Result<ReasoningTree> {
        let _guard = self.lock_session(id)?;
        let (session, _) = self.load_session(id)?;
        let source_hash = transcript_hash(&session.messages);
        let key = tree_key(id, req.generator);
        if !req.force {
            if let Some(rec) = self.store.get(Collection::Trees, &key)? {
                let cached: ReasoningTree = decode(&rec)?;
                if cached.source_hash == source_hash {
                    return Ok(cached);
                }
            }
        }

        let mut tree = match req.generator {
            Generator::Deterministic => extract_tree_deterministic(id, &session.messages),
            Generator::Llm => {
                let config_id = req.analysis_model.as_deref().unwrap_or(&session.header.model_config_id);
                let config = self.get_model_config(config_id)?.value;
                let provider = self.provider(&config.provider_id)?;
                generate_tree_llm(provider.as_ref(), &config, id, &session.messages, self.config.max_repairs)?
            }
        };

        let h = &session.header;
        let audit = self.audit_events(id)?;
        let mut warnings = Vec::new();
        match (self.plugin_for(&h.benchmark_id), self.get_item(&h.benchmark_id, &h.item_id)) {
            (Ok(plugin), Ok(item)) => {
                let outcome = check_consistency(&tree, &session.messages, &audit, &item, plugin.oracle());
                tree.flags.extend(outcome.flags);
                warnings.extend(outcome.warnings);
            }
            (Err(e), _) | (_, Err(e)) => warnings.push(format!("consistency check skipped: {e}")),
        }
        if !warnings.is_empty() {
            tree.meta.insert("warnings".into(), json!(warnings));
        }
        tree.normalize();

        let (audit_op, _) = self.next_audit_op(
            id,
            AuditKind::TreeGenerated,
            json!({
                "generator": req.generator,
                "source_hash": source_hash,
                "nodes": tree.nodes.len(),
                "edges": tree.edges.len(),
                "flags": tree.flags.len(),
            }),
        )?;
        self.store.commit(vec![WriteOp::put(Collection::Trees, key, encode(&tree)), audit_op])?;
        tracing::info!(session = %id, generator = %req.generator, flags = tree.flags.len(), "tree generated");
        Ok(tree)
    }
}
