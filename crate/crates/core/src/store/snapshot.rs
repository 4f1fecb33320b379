//! Snapshot directories: one JSONL file per collection plus `manifest.json`.
//!
//! Lines are canonical record encodings in key order, tombstones included, so
//! exporting the same store twice produces identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{canonical_record, Collection, Store, StoreError, StoreRecord};
use crate::model::Message;

pub const SNAPSHOT_SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectionEntry {
    pub count: usize,
    /// SHA-256 of the collection file, hex.
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub collections: BTreeMap<Collection, CollectionEntry>,
}

fn file_name(c: Collection) -> String {
    format!("{}.jsonl", c.as_str())
}

/// Writes every collection to `dir`. Returns the number of records written.
pub fn export_snapshot(store: &dyn Store, dir: &Path) -> Result<usize, StoreError> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest { schema_version: SNAPSHOT_SCHEMA_VERSION, collections: BTreeMap::new() };
    let mut total = 0;
    for c in Collection::ALL {
        let records = store.scan(c)?;
        let mut text = String::new();
        for rec in &records {
            text.push_str(&canonical_record(rec));
            text.push('\n');
        }
        fs::write(dir.join(file_name(c)), &text)?;
        manifest.collections.insert(
            c,
            CollectionEntry { count: records.len(), digest: hex::encode(Sha256::digest(text.as_bytes())) },
        );
        total += records.len();
    }
    let m = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join(MANIFEST), m)?;
    Ok(total)
}

fn corrupt(key: impl Into<String>, reason: impl Into<String>) -> StoreError {
    StoreError::CorruptSnapshot { key: key.into(), reason: reason.into() }
}

/// Reads and fully verifies a snapshot without touching any store.
pub fn read_snapshot(dir: &Path) -> Result<Vec<StoreRecord>, StoreError> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)
        .map_err(|e| corrupt(MANIFEST, e.to_string()))?;
    if manifest.schema_version != SNAPSHOT_SCHEMA_VERSION {
        return Err(corrupt(MANIFEST, format!("unsupported schema version {}", manifest.schema_version)));
    }
    let mut all = Vec::new();
    for (c, entry) in &manifest.collections {
        let name = file_name(*c);
        let text = fs::read_to_string(dir.join(&name))?;
        let mut count = 0;
        for (n, line) in text.lines().enumerate() {
            let rec: StoreRecord =
                serde_json::from_str(line).map_err(|e| corrupt(format!("{name}:{}", n + 1), e.to_string()))?;
            let key = format!("{}/{}", c.as_str(), rec.key);
            if rec.collection != *c {
                return Err(corrupt(key, "record filed under the wrong collection"));
            }
            if *c == Collection::Messages && !rec.deleted {
                let msg: Message =
                    serde_json::from_value(rec.body.clone()).map_err(|e| corrupt(key.clone(), e.to_string()))?;
                if !msg.hash_is_valid() {
                    return Err(corrupt(key, "content hash does not match message content"));
                }
            }
            all.push(rec);
            count += 1;
        }
        if count != entry.count {
            return Err(corrupt(name, format!("manifest lists {} records, file has {count}", entry.count)));
        }
        if hex::encode(Sha256::digest(text.as_bytes())) != entry.digest {
            return Err(corrupt(name, "file digest does not match manifest"));
        }
    }
    Ok(all)
}

/// Loads a snapshot into `store`. The store must be empty unless `force`,
/// in which case existing contents are replaced.
pub fn import_snapshot(store: &dyn Store, dir: &Path, force: bool) -> Result<usize, StoreError> {
    let records = read_snapshot(dir)?;
    if !force && !store.is_empty()? {
        return Err(StoreError::NotEmpty);
    }
    let n = records.len();
    store.restore(records, force)?;
    Ok(n)
}
