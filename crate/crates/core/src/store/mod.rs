//! Versioned, transactional record storage.
//!
//! Every resource lives in a [`Collection`] under a string key. Each
//! successful write to a key bumps its version by one; deletes are tombstones
//! that also bump the version. [`Store::commit`] applies a batch of writes
//! atomically, which is what multi-record operations such as in-place edits
//! rely on.

mod file;
pub mod snapshot;
mod sqlite;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use file::FileStore;
pub use snapshot::{export_snapshot, import_snapshot, Manifest};
pub use sqlite::SqliteStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collection {
    Providers,
    ModelConfigs,
    Benchmarks,
    Items,
    Sessions,
    Messages,
    Trees,
    AuditEvents,
}

impl Collection {
    pub const ALL: [Collection; 8] = [
        Collection::Providers,
        Collection::ModelConfigs,
        Collection::Benchmarks,
        Collection::Items,
        Collection::Sessions,
        Collection::Messages,
        Collection::Trees,
        Collection::AuditEvents,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Collection::Providers => "providers",
            Collection::ModelConfigs => "model_configs",
            Collection::Benchmarks => "benchmarks",
            Collection::Items => "items",
            Collection::Sessions => "sessions",
            Collection::Messages => "messages",
            Collection::Trees => "trees",
            Collection::AuditEvents => "audit_events",
        }
    }
}

impl fmt::Display for Collection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Collection {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Collection::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| StoreError::Corrupt(format!("unknown collection {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreRecord {
    pub collection: Collection,
    pub key: String,
    pub body: Value,
    pub version: u64,
    #[serde(default)]
    pub deleted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum WriteOp {
    Put {
        collection: Collection,
        key: String,
        body: Value,
        expected_version: Option<u64>,
    },
    /// Tombstone. Deleting an absent or already deleted key is a no-op that
    /// still reports the current version.
    Delete {
        collection: Collection,
        key: String,
        expected_version: Option<u64>,
    },
}

impl WriteOp {
    pub fn put(collection: Collection, key: impl Into<String>, body: Value) -> Self {
        WriteOp::Put { collection, key: key.into(), body, expected_version: None }
    }

    pub fn put_expect(collection: Collection, key: impl Into<String>, body: Value, expected: u64) -> Self {
        WriteOp::Put { collection, key: key.into(), body, expected_version: Some(expected) }
    }

    pub fn delete(collection: Collection, key: impl Into<String>) -> Self {
        WriteOp::Delete { collection, key: key.into(), expected_version: None }
    }

    fn target(&self) -> (Collection, &str, Option<u64>) {
        match self {
            WriteOp::Put { collection, key, expected_version, .. }
            | WriteOp::Delete { collection, key, expected_version } => (*collection, key, *expected_version),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("version conflict on {collection}/{key}: expected {expected}, current {actual}")]
    VersionConflict { collection: Collection, key: String, expected: u64, actual: u64 },
    #[error("storage unavailable: {0}")]
    StorageUnavailable(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("corrupt snapshot at {key}: {reason}")]
    CorruptSnapshot { key: String, reason: String },
    #[error("import target is not empty (use force to overwrite)")]
    NotEmpty,
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::StorageUnavailable(e.to_string())
    }
}

/// Equality filter on a top-level body field.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldFilter {
    pub field: String,
    pub equals: Value,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ListQuery {
    pub key_prefix: Option<String>,
    pub filters: Vec<FieldFilter>,
    /// Exclusive lower bound on the key (the `next_cursor` of a previous page).
    pub cursor: Option<String>,
    pub limit: Option<usize>,
    pub include_deleted: bool,
}

impl ListQuery {
    pub fn all() -> Self {
        ListQuery::default()
    }

    pub fn prefix(prefix: impl Into<String>) -> Self {
        ListQuery { key_prefix: Some(prefix.into()), ..Default::default() }
    }

    pub fn filter(mut self, field: impl Into<String>, equals: Value) -> Self {
        self.filters.push(FieldFilter { field: field.into(), equals });
        self
    }

    pub fn page(mut self, cursor: Option<String>, limit: usize) -> Self {
        self.cursor = cursor;
        self.limit = Some(limit);
        self
    }

    pub(crate) fn matches(&self, rec: &StoreRecord) -> bool {
        if rec.deleted && !self.include_deleted {
            return false;
        }
        if let Some(p) = &self.key_prefix {
            if !rec.key.starts_with(p.as_str()) {
                return false;
            }
        }
        if let Some(c) = &self.cursor {
            if rec.key.as_str() <= c.as_str() {
                return false;
            }
        }
        self.filters
            .iter()
            .all(|f| rec.body.get(&f.field).unwrap_or(&Value::Null) == &f.equals)
    }

    /// Applies filters and the page limit to records already sorted by key.
    pub(crate) fn paginate(&self, sorted: impl Iterator<Item = StoreRecord>) -> Page {
        let limit = self.limit.unwrap_or(usize::MAX);
        let mut records = Vec::new();
        let mut more = false;
        for rec in sorted.filter(|r| self.matches(r)) {
            if records.len() == limit {
                more = true;
                break;
            }
            records.push(rec);
        }
        let next_cursor = if more { records.last().map(|r| r.key.clone()) } else { None };
        Page { records, next_cursor }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Page {
    pub records: Vec<StoreRecord>,
    pub next_cursor: Option<String>,
}

pub trait Store: Send + Sync {
    /// Applies all ops or none. Returns the new version of each op's key.
    fn commit(&self, ops: Vec<WriteOp>) -> Result<Vec<u64>, StoreError>;

    /// Live record for a key; tombstones read as absent.
    fn get(&self, collection: Collection, key: &str) -> Result<Option<StoreRecord>, StoreError>;

    /// Current version of a key including tombstones (0 if never written).
    fn version(&self, collection: Collection, key: &str) -> Result<u64, StoreError>;

    fn list(&self, collection: Collection, query: &ListQuery) -> Result<Page, StoreError>;

    /// Every record of a collection, tombstones included, in key order.
    fn scan(&self, collection: Collection) -> Result<Vec<StoreRecord>, StoreError>;

    /// Writes records verbatim, keeping their versions. With `clear`, all
    /// existing records are dropped first.
    fn restore(&self, records: Vec<StoreRecord>, clear: bool) -> Result<(), StoreError>;

    fn put(
        &self,
        collection: Collection,
        key: &str,
        body: Value,
        expected_version: Option<u64>,
    ) -> Result<u64, StoreError> {
        let v = self.commit(vec![WriteOp::Put { collection, key: key.to_string(), body, expected_version }])?;
        Ok(v[0])
    }

    fn delete(&self, collection: Collection, key: &str) -> Result<u64, StoreError> {
        let v = self.commit(vec![WriteOp::delete(collection, key)])?;
        Ok(v[0])
    }

    fn is_empty(&self) -> Result<bool, StoreError> {
        for c in Collection::ALL {
            if !self.scan(c)?.is_empty() {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

pub type SharedStore = Arc<dyn Store>;

/// Deterministic key-ordered JSON encoding.
pub fn canonical_json(v: &Value) -> String {
    let mut out = String::new();
    write_canonical(v, &mut out);
    out
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("string serializes"));
                out.push(':');
                write_canonical(&map[k.as_str()], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        other => out.push_str(&serde_json::to_string(other).expect("scalar serializes")),
    }
}

/// Canonical encoding of a whole record, used for log lines and snapshots.
pub fn canonical_record(rec: &StoreRecord) -> String {
    canonical_json(&serde_json::to_value(rec).expect("record serializes"))
}

/// Resolves a batch against current versions. Shared by both backends so
/// that conflict semantics are identical. `current` returns the version and
/// deleted flag of a key, reflecting earlier ops in the same batch.
pub(crate) fn apply_batch<F>(ops: Vec<WriteOp>, mut current: F) -> Result<Vec<StoreRecord>, StoreError>
where
    F: FnMut(Collection, &str, &[StoreRecord]) -> Option<(u64, bool)>,
{
    let mut staged: Vec<StoreRecord> = Vec::with_capacity(ops.len());
    for op in ops {
        let (collection, key, expected) = op.target();
        let cur = staged
            .iter()
            .rev()
            .find(|r| r.collection == collection && r.key == key)
            .map(|r| (r.version, r.deleted))
            .or_else(|| current(collection, key, &staged));
        let (cur_version, cur_deleted) = cur.unwrap_or((0, true));
        if let Some(exp) = expected {
            if exp != cur_version {
                return Err(StoreError::VersionConflict {
                    collection,
                    key: key.to_string(),
                    expected: exp,
                    actual: cur_version,
                });
            }
        }
        let rec = match op {
            WriteOp::Put { collection, key, body, .. } => StoreRecord {
                collection,
                key,
                body,
                version: cur_version + 1,
                deleted: false,
            },
            WriteOp::Delete { collection, key, .. } => {
                if cur_deleted {
                    // Nothing to tombstone; report without writing.
                    staged.push(StoreRecord {
                        collection,
                        key,
                        body: Value::Null,
                        version: cur_version,
                        deleted: true,
                    });
                    continue;
                }
                StoreRecord { collection, key, body: Value::Null, version: cur_version + 1, deleted: true }
            }
        };
        staged.push(rec);
    }
    Ok(staged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn canonical_json_sorts_keys_recursively() {
        let v = json!({"b": 1, "a": {"z": [1, {"y": 2, "x": 3}], "c": null}});
        assert_eq!(canonical_json(&v), r#"{"a":{"c":null,"z":[1,{"x":3,"y":2}]},"b":1}"#);
    }

    #[test]
    fn collection_names_round_trip() {
        for c in Collection::ALL {
            assert_eq!(c.as_str().parse::<Collection>().unwrap(), c);
        }
        assert!("bogus".parse::<Collection>().is_err());
    }

    #[test]
    fn pagination_algebra() {
        let recs: Vec<StoreRecord> = (0..5)
            .map(|i| StoreRecord {
                collection: Collection::Sessions,
                key: format!("k{i}"),
                body: json!({}),
                version: 1,
                deleted: false,
            })
            .collect();
        let mut cursor = None;
        let mut pages = 0;
        let mut seen = Vec::new();
        loop {
            let q = ListQuery::all().page(cursor.clone(), 2);
            let page = q.paginate(recs.clone().into_iter());
            pages += 1;
            seen.extend(page.records.iter().map(|r| r.key.clone()));
            cursor = page.next_cursor;
            if cursor.is_none() {
                break;
            }
        }
        assert_eq!(pages, 3);
        assert_eq!(seen, vec!["k0", "k1", "k2", "k3", "k4"]);
    }
}
