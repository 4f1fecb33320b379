use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{apply_batch, canonical_json, Collection, ListQuery, Page, Store, StoreError, StoreRecord, WriteOp};

/// Embedded single-file backend.
///
/// The file is an append-only log with one JSON line per committed batch. On
/// open the log is replayed into memory. A trailing line that does not parse
/// is a torn write from a crash and is truncated away, so a batch is either
/// fully visible or absent.
pub struct FileStore {
    path: PathBuf,
    sync: bool,
    inner: Mutex<Inner>,
}

struct Inner {
    file: File,
    records: BTreeMap<(Collection, String), StoreRecord>,
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    records: Vec<StoreRecord>,
}

impl FileStore {
    /// Opens (or creates) the log at `path`, fsyncing every commit.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::open_with(path, true)
    }

    /// `sync = false` skips fsync; commits still reach the OS before returning.
    pub fn open_with(path: impl AsRef<Path>, sync: bool) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let records = replay(&mut file)?;
        Ok(FileStore { path, sync, inner: Mutex::new(Inner { file, records }) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append(&self, inner: &mut Inner, records: &[StoreRecord]) -> Result<(), StoreError> {
        let line = canonical_json(&serde_json::to_value(LogLine { records: records.to_vec() }).expect("serializes"));
        let mut buf = line.into_bytes();
        buf.push(b'\n');
        inner.file.write_all(&buf)?;
        inner.file.flush()?;
        if self.sync {
            inner.file.sync_data()?;
        }
        Ok(())
    }
}

fn replay(file: &mut File) -> Result<BTreeMap<(Collection, String), StoreRecord>, StoreError> {
    file.seek(SeekFrom::Start(0))?;
    let mut reader = BufReader::new(&*file);
    let mut records = BTreeMap::new();
    let mut good_len: u64 = 0;
    let mut buf = String::new();
    let mut torn = false;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf)?;
        if n == 0 {
            break;
        }
        let complete = buf.ends_with('\n');
        match serde_json::from_str::<LogLine>(buf.trim_end()) {
            Ok(line) if complete => {
                for rec in line.records {
                    records.insert((rec.collection, rec.key.clone()), rec);
                }
                good_len += n as u64;
            }
            _ => {
                // Only the final line may be incomplete.
                let mut rest = String::new();
                if reader.read_line(&mut rest)? != 0 {
                    return Err(StoreError::Corrupt(format!("unparseable log line at byte {good_len}")));
                }
                torn = true;
                break;
            }
        }
    }
    drop(reader);
    if torn {
        tracing::warn!(offset = good_len, "truncating torn trailing write in store log");
        file.set_len(good_len)?;
    }
    file.seek(SeekFrom::End(0))?;
    Ok(records)
}

impl Store for FileStore {
    fn commit(&self, ops: Vec<WriteOp>) -> Result<Vec<u64>, StoreError> {
        let mut inner = self.inner.lock();
        let staged = apply_batch(ops, |c, k, _| {
            inner.records.get(&(c, k.to_string())).map(|r| (r.version, r.deleted))
        })?;
        let versions = staged.iter().map(|r| r.version).collect();
        let writes: Vec<StoreRecord> = staged.into_iter().filter(|r| r.version > 0).collect();
        if !writes.is_empty() {
            self.append(&mut inner, &writes)?;
            for rec in writes {
                inner.records.insert((rec.collection, rec.key.clone()), rec);
            }
        }
        Ok(versions)
    }

    fn get(&self, collection: Collection, key: &str) -> Result<Option<StoreRecord>, StoreError> {
        let inner = self.inner.lock();
        Ok(inner.records.get(&(collection, key.to_string())).filter(|r| !r.deleted).cloned())
    }

    fn version(&self, collection: Collection, key: &str) -> Result<u64, StoreError> {
        let inner = self.inner.lock();
        Ok(inner.records.get(&(collection, key.to_string())).map_or(0, |r| r.version))
    }

    fn list(&self, collection: Collection, query: &ListQuery) -> Result<Page, StoreError> {
        let inner = self.inner.lock();
        let start = (collection, query.key_prefix.clone().unwrap_or_default());
        let iter = inner
            .records
            .range(start..)
            .take_while(|((c, _), _)| *c == collection)
            .map(|(_, r)| r.clone());
        Ok(query.paginate(iter))
    }

    fn scan(&self, collection: Collection) -> Result<Vec<StoreRecord>, StoreError> {
        let inner = self.inner.lock();
        Ok(inner
            .records
            .range((collection, String::new())..)
            .take_while(|((c, _), _)| *c == collection)
            .map(|(_, r)| r.clone())
            .collect())
    }

    fn restore(&self, records: Vec<StoreRecord>, clear: bool) -> Result<(), StoreError> {
        let mut inner = self.inner.lock();
        if clear {
            inner.file.set_len(0)?;
            inner.file.seek(SeekFrom::Start(0))?;
            inner.records.clear();
        }
        if records.is_empty() {
            return Ok(());
        }
        self.append(&mut inner, &records)?;
        for rec in records {
            inner.records.insert((rec.collection, rec.key.clone()), rec);
        }
        Ok(())
    }
}
