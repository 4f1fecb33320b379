//! Session and message data model.
//!
//! A [`Session`] is an ordered transcript of immutable [`Message`]s. Every
//! message carries a SHA-256 digest over a canonical byte encoding of
//! `(role, index, content)`, which is what fork-prefix checks and session
//! diffs compare. Forks copy their prefix by value and record the parent and
//! the index of the first differing message.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Opaque session identifier.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub String);

impl SessionId {
    pub fn generate() -> Self {
        SessionId(uuid::Uuid::new_v4().to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SessionId {
    fn from(s: &str) -> Self {
        SessionId(s.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Environment,
}

impl Role {
    /// Tag byte used in the canonical hash encoding.
    pub fn tag(self) -> u8 {
        match self {
            Role::System => 0,
            Role::User => 1,
            Role::Assistant => 2,
            Role::Environment => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Environment => "environment",
        }
    }
}

/// 256-bit content digest, serialized as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    /// Digest of the canonical encoding: role tag byte, index as 8-byte
    /// big-endian, then the UTF-8 content bytes.
    pub fn of(index: u64, role: Role, content: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update([role.tag()]);
        hasher.update(index.to_be_bytes());
        hasher.update(content.as_bytes());
        ContentHash(hasher.finalize().into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        let arr: [u8; 32] = bytes.try_into().ok()?;
        Some(ContentHash(arr))
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", self.to_hex())
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for ContentHash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ContentHash::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex chars"))
    }
}

/// Digest over a whole transcript: SHA-256 of the concatenated message digests.
pub fn transcript_hash(messages: &[Message]) -> ContentHash {
    let mut hasher = Sha256::new();
    for m in messages {
        hasher.update(m.content_hash.0);
    }
    ContentHash(hasher.finalize().into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub index: u64,
    pub role: Role,
    pub content: String,
    pub content_hash: ContentHash,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Message {
    pub fn new(index: u64, role: Role, content: impl Into<String>) -> Self {
        let content = content.into();
        Message {
            index,
            role,
            content_hash: ContentHash::of(index, role, &content),
            content,
            created_at: Utc::now(),
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, meta: BTreeMap<String, String>) -> Self {
        self.meta = meta;
        self
    }

    pub fn hash_is_valid(&self) -> bool {
        ContentHash::of(self.index, self.role, &self.content) == self.content_hash
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    TerminalSuccess,
    TerminalFailure,
    Aborted,
}

impl SessionStatus {
    pub fn is_terminal(self) -> bool {
        self != SessionStatus::Active
    }

    /// Only `active` may move, and only to a terminal state.
    pub fn can_transition_to(self, next: SessionStatus) -> bool {
        self == SessionStatus::Active && next.is_terminal()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    pub solved: bool,
    pub rounds_used: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_candidate_count: Option<usize>,
}

/// Everything about a session except its messages. This is what the store
/// keeps in the `sessions` collection and what the first JSONL export line holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub id: SessionId,
    pub benchmark_id: String,
    pub item_id: String,
    pub model_config_id: String,
    pub status: SessionStatus,
    pub parent_id: Option<SessionId>,
    pub fork_index: Option<u64>,
    pub score: Option<Score>,
    pub created_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    #[serde(flatten)]
    pub header: SessionHeader,
    pub messages: Vec<Message>,
}

impl Session {
    pub fn id(&self) -> &SessionId {
        &self.header.id
    }

    pub fn status(&self) -> SessionStatus {
        self.header.status
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn hashes(&self) -> Vec<ContentHash> {
        self.messages.iter().map(|m| m.content_hash).collect()
    }

    pub fn transcript_hash(&self) -> ContentHash {
        transcript_hash(&self.messages)
    }

    /// Checks the per-session invariants: contiguous indices, valid hashes,
    /// and `parent_id` set iff `fork_index` set.
    pub fn check_local_invariants(&self) -> Result<(), ModelError> {
        for (i, m) in self.messages.iter().enumerate() {
            if m.index != i as u64 {
                return Err(ModelError::NonContiguous { expected: i as u64, found: m.index });
            }
            if !m.hash_is_valid() {
                return Err(ModelError::HashMismatch { index: m.index });
            }
        }
        if self.header.parent_id.is_some() != self.header.fork_index.is_some() {
            return Err(ModelError::ForkLinkMismatch);
        }
        Ok(())
    }

    /// Fork-prefix invariant against the parent transcript.
    pub fn check_fork_prefix(&self, parent: &Session) -> Result<(), ModelError> {
        let Some(fork_index) = self.header.fork_index else {
            return Ok(());
        };
        let fi = fork_index as usize;
        if fi > parent.len() || fi > self.len() {
            return Err(ModelError::ForkIndexOutOfRange { fork_index, parent_len: parent.len() });
        }
        for i in 0..fi {
            if self.messages[i].content_hash != parent.messages[i].content_hash {
                return Err(ModelError::PrefixDiverges { index: i as u64 });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("message index {found} found where {expected} was expected")]
    NonContiguous { expected: u64, found: u64 },
    #[error("content hash of message {index} does not match its content")]
    HashMismatch { index: u64 },
    #[error("parent_id and fork_index must be set together")]
    ForkLinkMismatch,
    #[error("fork index {fork_index} exceeds parent length {parent_len}")]
    ForkIndexOutOfRange { fork_index: u64, parent_len: usize },
    #[error("fork prefix diverges from parent at index {index}")]
    PrefixDiverges { index: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditKind {
    InPlaceEdit,
    ForkCreated,
    StepExecuted,
    TreeGenerated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub id: String,
    pub session_id: SessionId,
    pub kind: AuditKind,
    pub payload: Value,
    pub at: DateTime<Utc>,
}

impl AuditEvent {
    pub fn new(session_id: SessionId, kind: AuditKind, payload: Value) -> Self {
        AuditEvent {
            id: uuid::Uuid::new_v4().to_string(),
            session_id,
            kind,
            payload,
            at: Utc::now(),
        }
    }
}

/// Replays the audit log over an initial transcript.
///
/// `fork_created` replaces the transcript with the copied messages in its
/// payload, `step_executed` appends `payload.messages`, and `in_place_edit`
/// truncates at `payload.index` and pushes `payload.message`.
pub fn replay_transcript(initial: &[Message], events: &[AuditEvent]) -> Result<Vec<Message>, String> {
    let mut out = initial.to_vec();
    for ev in events {
        match ev.kind {
            AuditKind::ForkCreated => {
                out = serde_json::from_value(ev.payload["messages"].clone())
                    .map_err(|e| format!("fork_created payload: {e}"))?;
            }
            AuditKind::StepExecuted => {
                let msgs: Vec<Message> = serde_json::from_value(ev.payload["messages"].clone())
                    .map_err(|e| format!("step_executed payload: {e}"))?;
                out.extend(msgs);
            }
            AuditKind::InPlaceEdit => {
                let index = ev.payload["index"]
                    .as_u64()
                    .ok_or_else(|| "in_place_edit payload lacks index".to_string())?;
                let msg: Message = serde_json::from_value(ev.payload["message"].clone())
                    .map_err(|e| format!("in_place_edit payload: {e}"))?;
                out.truncate(index as usize);
                out.push(msg);
            }
            AuditKind::TreeGenerated => {}
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForkRelation {
    ParentChild,
    Siblings,
    Unrelated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionDiff {
    pub common_prefix_len: usize,
    pub left_suffix: Vec<Message>,
    pub right_suffix: Vec<Message>,
    pub fork_relation: ForkRelation,
}

pub fn common_prefix_len(left: &[Message], right: &[Message]) -> usize {
    left.iter()
        .zip(right)
        .take_while(|(a, b)| a.content_hash == b.content_hash)
        .count()
}

/// Diff of two transcripts. `left_ancestry`/`right_ancestry` are the chains
/// of ids from each session up to its root, starting with the session itself.
pub fn diff(
    left: &Session,
    right: &Session,
    left_ancestry: &[SessionId],
    right_ancestry: &[SessionId],
) -> SessionDiff {
    let n = common_prefix_len(&left.messages, &right.messages);
    let fork_relation = if left.id() == right.id()
        || left_ancestry.contains(right.id())
        || right_ancestry.contains(left.id())
    {
        ForkRelation::ParentChild
    } else if left_ancestry.iter().any(|a| right_ancestry.contains(a)) {
        ForkRelation::Siblings
    } else {
        ForkRelation::Unrelated
    };
    SessionDiff {
        common_prefix_len: n,
        left_suffix: left.messages[n..].to_vec(),
        right_suffix: right.messages[n..].to_vec(),
        fork_relation,
    }
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("message {index} of session {session} fails hash verification")]
    HashMismatch { session: SessionId, index: u64 },
    #[error("session export is empty")]
    Empty,
}

/// Writes a session as JSONL: the header first, then one message per line.
pub fn write_session_jsonl<W: Write>(session: &Session, mut w: W) -> Result<(), ExportError> {
    let header = serde_json::to_value(&session.header).expect("header serializes");
    writeln!(w, "{}", serde_json::to_string(&header).expect("value serializes"))?;
    for m in &session.messages {
        let v = serde_json::to_value(m).expect("message serializes");
        writeln!(w, "{}", serde_json::to_string(&v).expect("value serializes"))?;
    }
    Ok(())
}

pub fn session_to_jsonl(session: &Session) -> String {
    let mut buf = Vec::new();
    write_session_jsonl(session, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("json is utf-8")
}

/// Reads the JSONL session format, verifying every hash and index.
pub fn read_session_jsonl<R: BufRead>(r: R) -> Result<Session, ExportError> {
    let mut lines = r.lines().enumerate().filter(|(_, l)| match l {
        Ok(s) => !s.trim().is_empty(),
        Err(_) => true,
    });
    let (_, first) = lines.next().ok_or(ExportError::Empty)?;
    let header: SessionHeader = serde_json::from_str(&first?)
        .map_err(|e| ExportError::Malformed { line: 1, reason: e.to_string() })?;
    let mut messages = Vec::new();
    for (n, line) in lines {
        let m: Message = serde_json::from_str(&line?)
            .map_err(|e| ExportError::Malformed { line: n + 1, reason: e.to_string() })?;
        if m.index != messages.len() as u64 {
            return Err(ExportError::Malformed {
                line: n + 1,
                reason: format!("expected message index {}, found {}", messages.len(), m.index),
            });
        }
        if !m.hash_is_valid() {
            return Err(ExportError::HashMismatch { session: header.id.clone(), index: m.index });
        }
        messages.push(m);
    }
    Ok(Session { header, messages })
}
