use std::collections::{BTreeMap, HashSet};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{decode, encode, Result, Workbench, WorkbenchError};
use crate::bench::deduction::round_state_for;
use crate::bench::{feedback_in, Reaction};
use crate::model::{
    diff, read_session_jsonl, session_to_jsonl, AuditEvent, AuditKind, Message, Role, Score, Session, SessionDiff,
    SessionHeader, SessionId, SessionStatus,
};
use crate::store::{Collection, ListQuery, StoreError, WriteOp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    InPlace,
    Fork,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub session_id: SessionId,
    /// Assistant replies and environment reactions, in order. Empty only
    /// when the session ended on its round limit without a new turn.
    pub new_messages: Vec<Message>,
    pub status_after: SessionStatus,
    /// Candidates still consistent with all recorded feedback.
    pub candidate_count: Option<usize>,
    pub steps_executed: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<Score>,
}

/// A reference in a session header that does not resolve.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DanglingReference {
    pub field: String,
    pub id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub session: Session,
    pub version: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<DanglingReference>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SessionFilter {
    pub parent_id: Option<String>,
    pub benchmark_id: Option<String>,
    pub status: Option<SessionStatus>,
    pub cursor: Option<String>,
    pub limit: Option<usize>,
}

pub(crate) fn message_key(id: &SessionId, index: u64) -> String {
    format!("{id}/{index:010}")
}

fn status_str(s: SessionStatus) -> Value {
    serde_json::to_value(s).expect("status serializes")
}

const READ_RETRIES: usize = 16;

impl Workbench {
    /// Consistent read of a session and its header version.
    pub(crate) fn load_session(&self, id: &SessionId) -> Result<(Session, u64)> {
        for _ in 0..READ_RETRIES {
            let rec = self
                .store
                .get(Collection::Sessions, id.as_str())?
                .ok_or_else(|| WorkbenchError::UnknownSession(id.to_string()))?;
            let page = self.store.list(Collection::Messages, &ListQuery::prefix(format!("{id}/")))?;
            if self.store.version(Collection::Sessions, id.as_str())? != rec.version {
                continue;
            }
            let header: SessionHeader = decode(&rec)?;
            let messages = page.records.iter().map(decode).collect::<Result<Vec<Message>>>()?;
            let session = Session { header, messages };
            session
                .check_local_invariants()
                .map_err(|e| StoreError::Corrupt(format!("session {id}: {e}")))?;
            return Ok((session, rec.version));
        }
        Err(StoreError::StorageUnavailable(format!("session {id} kept changing during read")).into())
    }

    pub(super) fn next_audit_op(&self, id: &SessionId, kind: AuditKind, payload: Value) -> Result<(WriteOp, AuditEvent)> {
        let q = ListQuery { key_prefix: Some(format!("{id}/")), include_deleted: true, ..Default::default() };
        let existing = self.store.list(Collection::AuditEvents, &q)?.records.len();
        let ev = AuditEvent::new(id.clone(), kind, payload);
        let op = WriteOp::put_expect(Collection::AuditEvents, format!("{id}/{existing:010}"), encode(&ev), 0);
        Ok((op, ev))
    }

    /// Commit that maps optimistic-concurrency failures on the session to `WriteConflict`.
    fn commit_session(&self, id: &SessionId, ops: Vec<WriteOp>) -> Result<()> {
        match self.store.commit(ops) {
            Ok(_) => Ok(()),
            Err(StoreError::VersionConflict { .. }) => Err(WorkbenchError::WriteConflict(id.to_string())),
            Err(e) => Err(e.into()),
        }
    }

    pub fn create_session(&self, benchmark_id: &str, item_id: &str, model_config_id: &str) -> Result<Session> {
        let plugin = self.plugin_for(benchmark_id)?;
        let item = self.get_item(benchmark_id, item_id)?;
        self.get_model_config(model_config_id)?;
        let initial = plugin.initial_messages(&item).map_err(|e| WorkbenchError::Validation(e.to_string()))?;
        let header = SessionHeader {
            id: SessionId::generate(),
            benchmark_id: benchmark_id.to_string(),
            item_id: item_id.to_string(),
            model_config_id: model_config_id.to_string(),
            status: SessionStatus::Active,
            parent_id: None,
            fork_index: None,
            score: None,
            created_at: Utc::now(),
        };
        let messages: Vec<Message> =
            initial.into_iter().enumerate().map(|(i, (r, c))| Message::new(i as u64, r, c)).collect();
        let mut ops = vec![WriteOp::put_expect(Collection::Sessions, header.id.as_str(), encode(&header), 0)];
        ops.extend(messages.iter().map(|m| WriteOp::put(Collection::Messages, message_key(&header.id, m.index), encode(m))));
        self.store.commit(ops)?;
        tracing::info!(session = %header.id, benchmark_id, item_id, "session created");
        Ok(Session { header, messages })
    }

    pub fn get_session(&self, id: &SessionId) -> Result<SessionView> {
        let (session, version) = self.load_session(id)?;
        let h = &session.header;
        let mut diagnostics = Vec::new();
        let mut dangling = |field: &str, id: &str| diagnostics.push(DanglingReference { field: field.into(), id: id.into() });
        if self.get_benchmark(&h.benchmark_id).is_err() {
            dangling("benchmark_id", &h.benchmark_id);
        } else if self.get_item(&h.benchmark_id, &h.item_id).is_err() {
            dangling("item_id", &h.item_id);
        }
        if self.store.get(Collection::ModelConfigs, &h.model_config_id)?.is_none() {
            dangling("model_config_id", &h.model_config_id);
        }
        if let Some(p) = &h.parent_id {
            if self.store.get(Collection::Sessions, p.as_str())?.is_none() {
                dangling("parent_id", p.as_str());
            }
        }
        Ok(SessionView { session, version, diagnostics })
    }

    pub fn list_sessions(&self, filter: &SessionFilter) -> Result<(Vec<SessionHeader>, Option<String>)> {
        let mut q = ListQuery { cursor: filter.cursor.clone(), limit: filter.limit, ..Default::default() };
        if let Some(p) = &filter.parent_id {
            q = q.filter("parent_id", Value::String(p.clone()));
        }
        if let Some(b) = &filter.benchmark_id {
            q = q.filter("benchmark_id", Value::String(b.clone()));
        }
        if let Some(s) = filter.status {
            q = q.filter("status", status_str(s));
        }
        self.list_decoded(Collection::Sessions, &q)
    }

    pub fn audit_events(&self, id: &SessionId) -> Result<Vec<AuditEvent>> {
        if self.store.get(Collection::Sessions, id.as_str())?.is_none() {
            return Err(WorkbenchError::UnknownSession(id.to_string()));
        }
        Ok(self.list_decoded(Collection::AuditEvents, &ListQuery::prefix(format!("{id}/")))?.0)
    }

    pub fn append_message(&self, id: &SessionId, role: Role, content: &str, meta: BTreeMap<String, String>) -> Result<Message> {
        let _guard = self.lock_session(id)?;
        let (session, version) = self.load_session(id)?;
        if session.status().is_terminal() {
            return Err(WorkbenchError::SessionTerminal(id.to_string()));
        }
        if role == Role::System && !session.is_empty() {
            return Err(WorkbenchError::Validation("system messages may only open a transcript".into()));
        }
        let m = Message::new(session.len() as u64, role, content).with_meta(meta);
        let (audit, _) = self.next_audit_op(id, AuditKind::StepExecuted, json!({"source": "append", "messages": [m]}))?;
        self.commit_session(
            id,
            vec![
                WriteOp::put_expect(Collection::Sessions, id.as_str(), encode(&session.header), version),
                WriteOp::put(Collection::Messages, message_key(id, m.index), encode(&m)),
                audit,
            ],
        )?;
        Ok(m)
    }

    /// Runs up to `steps` rounds. Stops early when the session ends; fails
    /// with `SessionTerminal` only if it had already ended. Each round is
    /// one commit made after the provider call returned.
    pub fn step_session(&self, id: &SessionId, steps: u32) -> Result<StepResult> {
        if steps == 0 {
            return Err(WorkbenchError::BadRequest("steps must be at least 1".into()));
        }
        let _guard = self.lock_session(id)?;
        let (mut session, mut version) = self.load_session(id)?;
        if session.status().is_terminal() {
            return Err(WorkbenchError::SessionTerminal(id.to_string()));
        }
        let h = session.header.clone();
        let plugin = self.plugin_for(&h.benchmark_id)?;
        let item = self.get_item(&h.benchmark_id, &h.item_id)?;
        let config = self.get_model_config(&h.model_config_id)?.value;
        let provider = self.provider(&config.provider_id)?;
        let max_rounds = plugin.max_rounds(&item)?;
        if steps > max_rounds {
            return Err(WorkbenchError::BadRequest(format!("steps must be at most the round limit {max_rounds}")));
        }

        let mut result = StepResult {
            session_id: id.clone(),
            new_messages: Vec::new(),
            status_after: SessionStatus::Active,
            candidate_count: None,
            steps_executed: 0,
            score: None,
        };
        for _ in 0..steps {
            let rounds_used = session.messages.iter().filter(|m| m.role == Role::Assistant).count() as u32;
            let mut new = Vec::new();
            let mut status = SessionStatus::Active;
            if rounds_used >= max_rounds {
                status = SessionStatus::TerminalFailure;
            } else {
                let reply = provider.complete(&config, &session.messages)?;
                let assistant = Message::new(session.len() as u64, Role::Assistant, reply.content).with_meta(reply.meta);
                let mut transcript = session.messages.clone();
                transcript.push(assistant.clone());
                let action = plugin.parse_action(&assistant.content);
                let state = round_state_for(plugin.as_ref(), &transcript);
                let text = match plugin.react(&item, &action, &state)? {
                    Reaction::Reply { text } => text,
                    Reaction::Terminal { success, text, .. } => {
                        status = if success { SessionStatus::TerminalSuccess } else { SessionStatus::TerminalFailure };
                        text
                    }
                };
                let env = Message::new(transcript.len() as u64, Role::Environment, text);
                new.push(assistant);
                new.push(env);
            }

            let mut header = session.header.clone();
            header.status = status;
            let mut after = session.messages.clone();
            after.extend(new.iter().cloned());
            if status.is_terminal() {
                header.score = Some(plugin.score(&item, &after, status)?);
            }
            let (audit, _) = self.next_audit_op(
                id,
                AuditKind::StepExecuted,
                json!({"messages": new, "status_after": status_str(status), "round": rounds_used + 1}),
            )?;
            let mut ops = vec![WriteOp::put_expect(Collection::Sessions, id.as_str(), encode(&header), version)];
            ops.extend(new.iter().map(|m| WriteOp::put(Collection::Messages, message_key(id, m.index), encode(m))));
            ops.push(audit);
            self.commit_session(id, ops)?;
            version += 1;
            tracing::debug!(session = %id, round = rounds_used + 1, status = ?status, "step committed");

            result.candidate_count = plugin
                .oracle()
                .and_then(|o| o.candidate_count(&item, &feedback_in(&after, after.len())).ok());
            result.new_messages.extend(new);
            result.status_after = status;
            result.score = header.score.clone();
            result.steps_executed += 1;
            session = Session { header, messages: after };
            if status.is_terminal() {
                break;
            }
        }
        Ok(result)
    }

    /// Ends an active session without a score.
    pub fn abort_session(&self, id: &SessionId) -> Result<Session> {
        let _guard = self.lock_session(id)?;
        let (mut session, version) = self.load_session(id)?;
        if !session.status().can_transition_to(SessionStatus::Aborted) {
            return Err(WorkbenchError::SessionTerminal(id.to_string()));
        }
        session.header.status = SessionStatus::Aborted;
        self.commit_session(
            id,
            vec![WriteOp::put_expect(Collection::Sessions, id.as_str(), encode(&session.header), version)],
        )?;
        Ok(session)
    }

    pub fn edit_message(
        &self,
        id: &SessionId,
        index: u64,
        content: &str,
        mode: EditMode,
        override_model_config_id: Option<&str>,
    ) -> Result<Session> {
        if let Some(m) = override_model_config_id {
            self.get_model_config(m)?;
        }
        match mode {
            EditMode::InPlace => self.edit_in_place(id, index, content, override_model_config_id),
            EditMode::Fork => self.fork(id, index, content, override_model_config_id),
        }
    }

    fn edit_in_place(&self, id: &SessionId, index: u64, content: &str, model: Option<&str>) -> Result<Session> {
        let _guard = self.lock_session(id)?;
        let (session, version) = self.load_session(id)?;
        if index as usize >= session.len() {
            return Err(WorkbenchError::IndexOutOfRange { index, len: session.len() });
        }
        if session.status().is_terminal() {
            return Err(WorkbenchError::SessionTerminal(id.to_string()));
        }
        let old = &session.messages[index as usize];
        let replacement = Message::new(index, old.role, content);
        let deleted = session.len() - index as usize - 1;
        let mut header = session.header.clone();
        header.status = SessionStatus::Active;
        header.score = None;
        if let Some(m) = model {
            header.model_config_id = m.to_string();
        }
        let (audit, _) = self.next_audit_op(
            id,
            AuditKind::InPlaceEdit,
            json!({
                "index": index,
                "role": old.role,
                "old_hash": old.content_hash,
                "old_content": old.content,
                "deleted": deleted,
                "environment_edit": old.role == Role::Environment,
                "model_config_id": header.model_config_id,
                "message": replacement,
            }),
        )?;
        let mut ops = vec![
            WriteOp::put_expect(Collection::Sessions, id.as_str(), encode(&header), version),
            WriteOp::put(Collection::Messages, message_key(id, index), encode(&replacement)),
        ];
        ops.extend(session.messages[index as usize + 1..].iter().map(|m| WriteOp::delete(Collection::Messages, message_key(id, m.index))));
        ops.push(audit);
        self.commit_session(id, ops)?;
        tracing::info!(session = %id, index, deleted, "in-place edit");
        let mut messages = session.messages[..index as usize].to_vec();
        messages.push(replacement);
        Ok(Session { header, messages })
    }

    fn fork(&self, parent_id: &SessionId, index: u64, content: &str, model: Option<&str>) -> Result<Session> {
        let (parent, _) = self.load_session(parent_id)?;
        if index as usize >= parent.len() {
            return Err(WorkbenchError::IndexOutOfRange { index, len: parent.len() });
        }
        let ph = &parent.header;
        let header = SessionHeader {
            id: SessionId::generate(),
            benchmark_id: ph.benchmark_id.clone(),
            item_id: ph.item_id.clone(),
            model_config_id: model.map(str::to_string).unwrap_or_else(|| ph.model_config_id.clone()),
            status: SessionStatus::Active,
            parent_id: Some(parent_id.clone()),
            fork_index: Some(index),
            score: None,
            created_at: Utc::now(),
        };
        let mut messages = parent.messages[..index as usize].to_vec();
        messages.push(Message::new(index, parent.messages[index as usize].role, content));
        let (audit, _) = self.next_audit_op(
            &header.id,
            AuditKind::ForkCreated,
            json!({
                "parent_id": parent_id,
                "fork_index": index,
                "parent_hash": parent.messages[index as usize].content_hash,
                "environment_edit": parent.messages[index as usize].role == Role::Environment,
                "model_config_id": header.model_config_id,
                "messages": messages,
            }),
        )?;
        let mut ops = vec![WriteOp::put_expect(Collection::Sessions, header.id.as_str(), encode(&header), 0)];
        ops.extend(messages.iter().map(|m| WriteOp::put(Collection::Messages, message_key(&header.id, m.index), encode(m))));
        ops.push(audit);
        self.store.commit(ops)?;
        tracing::info!(parent = %parent_id, child = %header.id, index, "fork created");
        Ok(Session { header, messages })
    }

    /// Ids from `id` up through its ancestors. Stops at a missing parent or a
    /// repeated id.
    pub fn ancestry(&self, id: &SessionId) -> Result<Vec<SessionId>> {
        let mut chain = vec![id.clone()];
        let mut seen: HashSet<SessionId> = chain.iter().cloned().collect();
        let mut current = id.clone();
        while let Some(rec) = self.store.get(Collection::Sessions, current.as_str())? {
            let header: SessionHeader = decode(&rec)?;
            match header.parent_id {
                Some(p) if seen.insert(p.clone()) => {
                    chain.push(p.clone());
                    current = p;
                }
                _ => break,
            }
        }
        Ok(chain)
    }

    pub fn diff_sessions(&self, left: &SessionId, right: &SessionId) -> Result<SessionDiff> {
        let (l, _) = self.load_session(left)?;
        let (r, _) = self.load_session(right)?;
        Ok(diff(&l, &r, &self.ancestry(left)?, &self.ancestry(right)?))
    }

    /// Recomputes the score of an ended session from its transcript.
    pub fn score_session(&self, id: &SessionId) -> Result<Score> {
        let (session, _) = self.load_session(id)?;
        let h = &session.header;
        let plugin = self.plugin_for(&h.benchmark_id)?;
        let item = self.get_item(&h.benchmark_id, &h.item_id)?;
        Ok(plugin.score(&item, &session.messages, h.status)?)
    }

    pub fn export_session(&self, id: &SessionId) -> Result<String> {
        Ok(session_to_jsonl(&self.load_session(id)?.0))
    }

    /// Imports a JSONL session export. The id must be new; a fork whose
    /// parent is present must still share the parent's prefix.
    pub fn import_session(&self, text: &str) -> Result<Session> {
        let session = read_session_jsonl(text.as_bytes())?;
        session.check_local_invariants().map_err(|e| WorkbenchError::Validation(e.to_string()))?;
        let id = session.id().clone();
        let _guard = self.lock_session(&id)?;
        if self.store.get(Collection::Sessions, id.as_str())?.is_some() {
            return Err(WorkbenchError::AlreadyExists { collection: Collection::Sessions, key: id.to_string() });
        }
        if let Some(p) = &session.header.parent_id {
            if let Ok((parent, _)) = self.load_session(p) {
                session.check_fork_prefix(&parent).map_err(|e| WorkbenchError::Validation(e.to_string()))?;
            }
        }
        let version = self.store.version(Collection::Sessions, id.as_str())?;
        let mut ops = vec![WriteOp::put_expect(Collection::Sessions, id.as_str(), encode(&session.header), version)];
        ops.extend(session.messages.iter().map(|m| WriteOp::put(Collection::Messages, message_key(&id, m.index), encode(m))));
        self.store.commit(ops)?;
        Ok(session)
    }
}
