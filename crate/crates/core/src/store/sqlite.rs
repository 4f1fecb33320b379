use std::path::Path;

use parking_lot::Mutex;
use rusqlite::{params, Connection, OptionalExtension};

use super::{apply_batch, canonical_json, Collection, ListQuery, Page, Store, StoreError, StoreRecord, WriteOp};

/// Relational backend on SQLite. One `records` table keyed by
/// `(collection, key)`; every batch commits in a single transaction.
pub struct SqliteStore {
    conn: Mutex<Connection>,
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS records (
    collection TEXT NOT NULL,
    key        TEXT NOT NULL,
    version    INTEGER NOT NULL,
    deleted    INTEGER NOT NULL,
    body       TEXT NOT NULL,
    PRIMARY KEY (collection, key)
);
CREATE TABLE IF NOT EXISTS meta (
    name  TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
INSERT OR IGNORE INTO meta (name, value) VALUES ('schema_version', '1');
";

fn unavailable(e: rusqlite::Error) -> StoreError {
    StoreError::StorageUnavailable(e.to_string())
}

impl SqliteStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let conn = Connection::open(path).map_err(unavailable)?;
        Self::init(conn)
    }

    pub fn open_in_memory() -> Result<Self, StoreError> {
        Self::init(Connection::open_in_memory().map_err(unavailable)?)
    }

    fn init(conn: Connection) -> Result<Self, StoreError> {
        conn.pragma_update(None, "journal_mode", "WAL").map_err(unavailable)?;
        conn.pragma_update(None, "synchronous", "FULL").map_err(unavailable)?;
        conn.execute_batch(SCHEMA).map_err(unavailable)?;
        Ok(SqliteStore { conn: Mutex::new(conn) })
    }
}

fn row_to_record(collection: Collection, row: &rusqlite::Row<'_>) -> rusqlite::Result<StoreRecord> {
    let key: String = row.get(0)?;
    let version: i64 = row.get(1)?;
    let deleted: i64 = row.get(2)?;
    let body: String = row.get(3)?;
    let body = serde_json::from_str(&body)
        .map_err(|e| rusqlite::Error::FromSqlConversionFailure(3, rusqlite::types::Type::Text, Box::new(e)))?;
    Ok(StoreRecord { collection, key, body, version: version as u64, deleted: deleted != 0 })
}

fn write_record(tx: &rusqlite::Transaction<'_>, rec: &StoreRecord) -> rusqlite::Result<()> {
    tx.execute(
        "INSERT INTO records (collection, key, version, deleted, body) VALUES (?1, ?2, ?3, ?4, ?5)
         ON CONFLICT (collection, key) DO UPDATE SET version = excluded.version,
             deleted = excluded.deleted, body = excluded.body",
        params![rec.collection.as_str(), rec.key, rec.version as i64, rec.deleted as i64, canonical_json(&rec.body)],
    )?;
    Ok(())
}

impl Store for SqliteStore {
    fn commit(&self, ops: Vec<WriteOp>) -> Result<Vec<u64>, StoreError> {
        let mut conn = self.conn.lock();
        let tx = conn.transaction().map_err(unavailable)?;
        let mut lookup_err = None;
        let staged = {
            let mut stmt = tx
                .prepare_cached("SELECT version, deleted FROM records WHERE collection = ?1 AND key = ?2")
                .map_err(unavailable)?;
            apply_batch(ops, |c, k, _| {
                match stmt
                    .query_row(params![c.as_str(), k], |r| Ok((r.get::<_, i64>(0)? as u64, r.get::<_, i64>(1)? != 0)))
                    .optional()
                {
                    Ok(v) => v,
                    Err(e) => {
                        lookup_err = Some(e);
                        None
                    }
                }
            })?
        };
        if let Some(e) = lookup_err {
            return Err(unavailable(e));
        }
        for rec in staged.iter().filter(|r| r.version > 0) {
            write_record(&tx, rec).map_err(unavailable)?;
        }
        tx.commit().map_err(unavailable)?;
        Ok(staged.iter().map(|r| r.version).collect())
    }

    fn get(&self, collection: Collection, key: &str) -> Result<Option<StoreRecord>, StoreError> {
        let conn = self.conn.lock();
        conn.query_row(
            "SELECT key, version, deleted, body FROM records WHERE collection = ?1 AND key = ?2 AND deleted = 0",
            params![collection.as_str(), key],
            |row| row_to_record(collection, row),
        )
        .optional()
        .map_err(unavailable)
    }

    fn version(&self, collection: Collection, key: &str) -> Result<u64, StoreError> {
        let conn = self.conn.lock();
        let v: Option<i64> = conn
            .query_row(
                "SELECT version FROM records WHERE collection = ?1 AND key = ?2",
                params![collection.as_str(), key],
                |r| r.get(0),
            )
            .optional()
            .map_err(unavailable)?;
        Ok(v.unwrap_or(0) as u64)
    }

    fn list(&self, collection: Collection, query: &ListQuery) -> Result<Page, StoreError> {
        let conn = self.conn.lock();
        let lower = match (&query.key_prefix, &query.cursor) {
            (Some(p), Some(c)) => p.clone().max(c.clone()),
            (Some(p), None) => p.clone(),
            (None, Some(c)) => c.clone(),
            (None, None) => String::new(),
        };
        let mut stmt = conn
            .prepare_cached(
                "SELECT key, version, deleted, body FROM records WHERE collection = ?1 AND key >= ?2 ORDER BY key",
            )
            .map_err(unavailable)?;
        let rows = stmt
            .query_map(params![collection.as_str(), lower], |row| row_to_record(collection, row))
            .map_err(unavailable)?
            .collect::<Result<Vec<_>, _>>()
            .map_err(unavailable)?;
        Ok(query.paginate(rows.into_iter()))
    }

    fn scan(&self, collection: Collection) -> Result<Vec<StoreRecord>, StoreError> {
        let conn = self.conn.lock();
        let mut stmt = conn
            .prepare_cached("SELECT key, version, deleted, body FROM records WHERE collection = ?1 ORDER BY key")
            .map_err(unavailable)?;
        let rows = stmt
            .query_map(params![collection.as_str()], |row| row_to_record(collection, row))
            .map_err(unavailable)?
            .collect::<Result<Vec<_>, _>>()
            .map_err(unavailable)?;
        Ok(rows)
    }

    fn restore(&self, records: Vec<StoreRecord>, clear: bool) -> Result<(), StoreError> {
        let mut conn = self.conn.lock();
        let tx = conn.transaction().map_err(unavailable)?;
        if clear {
            tx.execute("DELETE FROM records", []).map_err(unavailable)?;
        }
        for rec in &records {
            write_record(&tx, rec).map_err(unavailable)?;
        }
        tx.commit().map_err(unavailable)
    }
}
