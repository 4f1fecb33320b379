//! Orchestration over the store: resource registries, session lifecycle,
//! stepping, editing, forking and tree generation.
//!
//! Mutations of one session are serialized by a per-session lock. The lock
//! is taken with a bounded wait (zero by default), so a second concurrent
//! mutator gets [`WorkbenchError::WriteConflict`] instead of queueing behind
//! a long provider call. Every multi-record change is one store commit that
//! also bumps the session header's version, which is what readers use to
//! detect and retry a torn read.

mod sessions;
mod trees;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::{ArcMutexGuard, Mutex, RawMutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::bench::{BenchError, PluginRegistry, SharedPlugin};
use crate::model::{ExportError, SessionId};
use crate::providers::{
    build_provider, probe, CallLimiter, HealthReport, ModelConfig, ProviderError, ProviderSpec, SharedProvider,
};
use crate::store::{Collection, ListQuery, Page, SharedStore, StoreError, StoreRecord, WriteOp};
use crate::tree::TreeError;

pub use sessions::{DanglingReference, EditMode, SessionFilter, SessionView, StepResult};
pub use trees::TreeRequest;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkbenchError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown benchmark {0}")]
    UnknownBenchmark(String),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("unknown model config {0}")]
    UnknownModelConfig(String),
    #[error("unknown provider {0}")]
    UnknownProvider(String),
    #[error("no {generator} tree stored for session {session}")]
    TreeNotFound { session: String, generator: String },
    #[error("stored {generator} tree for session {session} predates the current transcript")]
    StaleTree { session: String, generator: String },
    #[error("session {0} is terminal")]
    SessionTerminal(String),
    #[error("session {0} is busy with another write")]
    WriteConflict(String),
    #[error("{collection} {key} already exists")]
    AlreadyExists { collection: Collection, key: String },
    #[error("message index {index} out of range for a transcript of {len}")]
    IndexOutOfRange { index: u64, len: usize },
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Tree(TreeError),
    #[error(transparent)]
    Bench(#[from] BenchError),
}

impl From<TreeError> for WorkbenchError {
    fn from(e: TreeError) -> Self {
        match e {
            TreeError::Provider(p) => WorkbenchError::Provider(p),
            other => WorkbenchError::Tree(other),
        }
    }
}

impl From<ExportError> for WorkbenchError {
    fn from(e: ExportError) -> Self {
        match e {
            ExportError::HashMismatch { session, index } => WorkbenchError::Store(StoreError::CorruptSnapshot {
                key: format!("messages/{session}/{index:010}"),
                reason: "content hash does not match content".into(),
            }),
            other => WorkbenchError::Validation(other.to_string()),
        }
    }
}

pub type Result<T, E = WorkbenchError> = std::result::Result<T, E>;

#[derive(Clone, Debug)]
pub struct WorkbenchConfig {
    /// How long a mutation waits for a busy session before `WriteConflict`.
    pub lock_wait: Duration,
    /// Cap on concurrent remote provider calls.
    pub remote_concurrency: usize,
    pub max_repairs: u32,
}

impl Default for WorkbenchConfig {
    fn default() -> Self {
        WorkbenchConfig {
            lock_wait: Duration::ZERO,
            remote_concurrency: CallLimiter::DEFAULT_MAX,
            max_repairs: crate::tree::llm::DEFAULT_MAX_REPAIRS,
        }
    }
}

/// A named benchmark backed by a registered plugin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub id: String,
    pub plugin_id: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<DateTime<Utc>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versioned<T> {
    #[serde(flatten)]
    pub value: T,
    pub version: u64,
}

pub struct Workbench {
    store: SharedStore,
    plugins: PluginRegistry,
    limiter: Arc<CallLimiter>,
    config: WorkbenchConfig,
    /// Built clients keyed by provider id, tagged with the provider record version they
    /// were built from.
    clients: Mutex<HashMap<String, (u64, SharedProvider)>>,
    overrides: RwLock<HashMap<String, SharedProvider>>,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

pub(crate) type SessionGuard = ArcMutexGuard<RawMutex, ()>;

fn decode<T: serde::de::DeserializeOwned>(rec: &StoreRecord) -> Result<T> {
    serde_json::from_value(rec.body.clone())
        .map_err(|e| StoreError::Corrupt(format!("{}/{}: {e}", rec.collection, rec.key)).into())
}

fn encode<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("domain types serialize")
}

fn validation(e: ProviderError) -> WorkbenchError {
    match e {
        ProviderError::Validation(m) => WorkbenchError::Validation(m),
        other => WorkbenchError::Provider(other),
    }
}

impl Workbench {
    pub fn new(store: SharedStore, config: WorkbenchConfig) -> Self {
        Workbench::with_plugins(store, PluginRegistry::with_builtin(), config)
    }

    pub fn with_plugins(store: SharedStore, plugins: PluginRegistry, config: WorkbenchConfig) -> Self {
        Workbench {
            store,
            plugins,
            limiter: Arc::new(CallLimiter::new(config.remote_concurrency)),
            config,
            clients: Mutex::new(HashMap::new()),
            overrides: RwLock::new(HashMap::new()),
            locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn store(&self) -> &SharedStore {
        &self.store
    }

    pub fn config(&self) -> &WorkbenchConfig {
        &self.config
    }

    pub fn limiter(&self) -> &Arc<CallLimiter> {
        &self.limiter
    }

    /// Serves `provider_id` from `client` instead of building one from its
    /// record. The provider must still be registered.
    pub fn override_provider(&self, provider_id: impl Into<String>, client: SharedProvider) {
        self.overrides.write().insert(provider_id.into(), client);
    }

    pub(crate) fn lock_session(&self, id: &SessionId) -> Result<SessionGuard> {
        let lock = self.locks.lock().entry(id.as_str().to_string()).or_default().clone();
        let guard = if self.config.lock_wait.is_zero() {
            lock.try_lock_arc()
        } else {
            lock.try_lock_arc_for(self.config.lock_wait)
        };
        match guard {
            Some(g) => Ok(g),
            None => Err(WorkbenchError::WriteConflict(id.to_string())),
        }
    }

    fn commit(&self, ops: Vec<WriteOp>) -> Result<Vec<u64>> {
        Ok(self.store.commit(ops)?)
    }

    fn get_versioned<T: serde::de::DeserializeOwned>(&self, c: Collection, key: &str) -> Result<Option<Versioned<T>>> {
        match self.store.get(c, key)? {
            Some(rec) => Ok(Some(Versioned { value: decode(&rec)?, version: rec.version })),
            None => Ok(None),
        }
    }

    fn list_decoded<T: serde::de::DeserializeOwned>(&self, c: Collection, query: &ListQuery) -> Result<(Vec<T>, Option<String>)> {
        let Page { records, next_cursor } = self.store.list(c, query)?;
        let items = records.iter().map(decode).collect::<Result<Vec<T>>>()?;
        Ok((items, next_cursor))
    }

    /// Create (key must be absent or deleted) or update of a keyed record.
    /// The write is conditional on `expected_version`, or on the version
    /// seen here when none is given.
    fn upsert(&self, c: Collection, key: &str, body: Value, create: bool, expected_version: Option<u64>) -> Result<u64> {
        if create && self.store.get(c, key)?.is_some() {
            return Err(WorkbenchError::AlreadyExists { collection: c, key: key.to_string() });
        }
        let expected = match expected_version {
            Some(v) => v,
            None => self.store.version(c, key)?,
        };
        let op = WriteOp::put_expect(c, key, body, expected);
        Ok(self.commit(vec![op])?[0])
    }

    // ---- providers ----

    pub fn put_provider(&self, spec: ProviderSpec, create: bool, expected_version: Option<u64>) -> Result<Versioned<ProviderSpec>> {
        spec.validate().map_err(validation)?;
        if !create && self.store.get(Collection::Providers, &spec.id)?.is_none() {
            return Err(WorkbenchError::UnknownProvider(spec.id));
        }
        let version = self.upsert(Collection::Providers, &spec.id, encode(&spec), create, expected_version)?;
        self.clients.lock().remove(&spec.id);
        Ok(Versioned { value: spec, version })
    }

    pub fn get_provider(&self, id: &str) -> Result<Versioned<ProviderSpec>> {
        self.get_versioned(Collection::Providers, id)?
            .ok_or_else(|| WorkbenchError::UnknownProvider(id.to_string()))
    }

    pub fn list_providers(&self, cursor: Option<String>, limit: Option<usize>) -> Result<(Vec<ProviderSpec>, Option<String>)> {
        self.list_decoded(Collection::Providers, &ListQuery { cursor, limit, ..Default::default() })
    }

    pub fn delete_provider(&self, id: &str) -> Result<()> {
        self.get_provider(id)?;
        self.store.delete(Collection::Providers, id)?;
        self.clients.lock().remove(id);
        Ok(())
    }

    /// Client for a provider id, built on first use and rebuilt when its spec changes.
    pub fn provider(&self, id: &str) -> Result<SharedProvider> {
        let rec = self.store.get(Collection::Providers, id)?.ok_or_else(|| WorkbenchError::UnknownProvider(id.into()))?;
        if let Some(p) = self.overrides.read().get(id) {
            return Ok(p.clone());
        }
        let mut clients = self.clients.lock();
        if let Some((v, p)) = clients.get(id) {
            if *v == rec.version {
                return Ok(p.clone());
            }
        }
        let spec: ProviderSpec = decode(&rec)?;
        let client = build_provider(&spec, self.limiter.clone()).map_err(validation)?;
        clients.insert(id.to_string(), (rec.version, client.clone()));
        Ok(client)
    }

    /// Health probe. Uses `model_config_id` if given, else the first model
    /// config registered for the provider, else a placeholder model name.
    pub fn probe_provider(&self, id: &str, model_config_id: Option<&str>) -> Result<HealthReport> {
        let client = self.provider(id)?;
        let config = match model_config_id {
            Some(m) => self.get_model_config(m)?.value,
            None => {
                let q = ListQuery::all().filter("provider_id", Value::String(id.into())).page(None, 1);
                let (mut found, _) = self.list_decoded::<ModelConfig>(Collection::ModelConfigs, &q)?;
                found.pop().unwrap_or_else(|| ModelConfig::new("probe", id, "probe"))
            }
        };
        Ok(probe(client.as_ref(), id, &config))
    }

    // ---- model configs ----

    pub fn put_model_config(&self, config: ModelConfig, create: bool, expected_version: Option<u64>) -> Result<Versioned<ModelConfig>> {
        config.validate().map_err(validation)?;
        if self.store.get(Collection::Providers, &config.provider_id)?.is_none() {
            return Err(WorkbenchError::UnknownProvider(config.provider_id));
        }
        if !create && self.store.get(Collection::ModelConfigs, &config.id)?.is_none() {
            return Err(WorkbenchError::UnknownModelConfig(config.id));
        }
        let version = self.upsert(Collection::ModelConfigs, &config.id, encode(&config), create, expected_version)?;
        Ok(Versioned { value: config, version })
    }

    pub fn get_model_config(&self, id: &str) -> Result<Versioned<ModelConfig>> {
        self.get_versioned(Collection::ModelConfigs, id)?
            .ok_or_else(|| WorkbenchError::UnknownModelConfig(id.to_string()))
    }

    pub fn list_model_configs(&self, cursor: Option<String>, limit: Option<usize>) -> Result<(Vec<ModelConfig>, Option<String>)> {
        self.list_decoded(Collection::ModelConfigs, &ListQuery { cursor, limit, ..Default::default() })
    }

    pub fn delete_model_config(&self, id: &str) -> Result<()> {
        self.get_model_config(id)?;
        self.store.delete(Collection::ModelConfigs, id)?;
        Ok(())
    }

    // ---- benchmarks and items ----

    /// A benchmark is a stored record, or a registered plugin under its own id.
    pub fn get_benchmark(&self, id: &str) -> Result<BenchmarkRecord> {
        if let Some(v) = self.get_versioned::<BenchmarkRecord>(Collection::Benchmarks, id)? {
            return Ok(v.value);
        }
        match self.plugins.get(id) {
            Some(p) => Ok(BenchmarkRecord {
                id: id.to_string(),
                plugin_id: p.id().to_string(),
                description: p.description().to_string(),
                created_at: None,
            }),
            None => Err(WorkbenchError::UnknownBenchmark(id.to_string())),
        }
    }

    pub fn list_benchmarks(&self) -> Result<Vec<BenchmarkRecord>> {
        let (mut stored, _) = self.list_decoded::<BenchmarkRecord>(Collection::Benchmarks, &ListQuery::all())?;
        for p in self.plugins.iter() {
            if !stored.iter().any(|b| b.id == p.id()) {
                stored.push(self.get_benchmark(p.id())?);
            }
        }
        stored.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(stored)
    }

    pub fn put_benchmark(&self, mut record: BenchmarkRecord, create: bool) -> Result<BenchmarkRecord> {
        if record.id.trim().is_empty() || record.id.contains('/') {
            return Err(WorkbenchError::Validation("benchmark id must be non-empty and contain no '/'".into()));
        }
        if self.plugins.get(&record.plugin_id).is_none() {
            return Err(WorkbenchError::Validation(format!("no benchmark plugin {:?}", record.plugin_id)));
        }
        let exists = self.get_benchmark(&record.id).is_ok();
        if create && exists {
            return Err(WorkbenchError::AlreadyExists { collection: Collection::Benchmarks, key: record.id });
        }
        if !create && !exists {
            return Err(WorkbenchError::UnknownBenchmark(record.id));
        }
        record.created_at.get_or_insert_with(Utc::now);
        self.store.put(Collection::Benchmarks, &record.id, encode(&record), None)?;
        Ok(record)
    }

    pub fn delete_benchmark(&self, id: &str) -> Result<()> {
        if self.store.get(Collection::Benchmarks, id)?.is_none() {
            return Err(if self.plugins.get(id).is_some() {
                WorkbenchError::BadRequest(format!("built-in benchmark {id} cannot be deleted"))
            } else {
                WorkbenchError::UnknownBenchmark(id.to_string())
            });
        }
        self.store.delete(Collection::Benchmarks, id)?;
        Ok(())
    }

    pub fn plugin_for(&self, benchmark_id: &str) -> Result<SharedPlugin> {
        let b = self.get_benchmark(benchmark_id)?;
        self.plugins
            .get(&b.plugin_id)
            .ok_or_else(|| WorkbenchError::Validation(format!("benchmark {benchmark_id} uses unregistered plugin {}", b.plugin_id)))
    }

    fn item_key(benchmark_id: &str, item_id: &str) -> String {
        format!("{benchmark_id}/{item_id}")
    }

    pub fn put_item(&self, benchmark_id: &str, item: Value, create: bool) -> Result<Value> {
        let plugin = self.plugin_for(benchmark_id)?;
        let id = item
            .get("id")
            .and_then(Value::as_str)
            .filter(|s| !s.is_empty() && !s.contains('/'))
            .ok_or_else(|| WorkbenchError::Validation("item needs a string id without '/'".into()))?
            .to_string();
        plugin.validate_item(&item).map_err(|e| WorkbenchError::Validation(e.to_string()))?;
        let key = Self::item_key(benchmark_id, &id);
        let exists = self.store.get(Collection::Items, &key)?.is_some();
        if create && exists {
            return Err(WorkbenchError::AlreadyExists { collection: Collection::Items, key });
        }
        if !create && !exists {
            return Err(WorkbenchError::UnknownItem(id));
        }
        self.store.put(Collection::Items, &key, item.clone(), None)?;
        Ok(item)
    }

    /// Generates an item with the plugin's generator and stores it.
    pub fn generate_item(&self, benchmark_id: &str, item_id: Option<&str>, seed: u64, params: &Value) -> Result<Value> {
        let plugin = self.plugin_for(benchmark_id)?;
        let id = item_id.map(str::to_string).unwrap_or_else(|| format!("gen-{seed}"));
        let item = plugin.generate_item(&id, seed, params).map_err(|e| match e {
            BenchError::InvalidItem(m) => WorkbenchError::Validation(m),
            other => WorkbenchError::Bench(other),
        })?;
        self.put_item(benchmark_id, item, true)
    }

    pub fn get_item(&self, benchmark_id: &str, item_id: &str) -> Result<Value> {
        self.get_benchmark(benchmark_id)?;
        self.store
            .get(Collection::Items, &Self::item_key(benchmark_id, item_id))?
            .map(|r| r.body)
            .ok_or_else(|| WorkbenchError::UnknownItem(item_id.to_string()))
    }

    pub fn list_items(&self, benchmark_id: &str, cursor: Option<String>, limit: Option<usize>) -> Result<(Vec<Value>, Option<String>)> {
        self.get_benchmark(benchmark_id)?;
        let prefix = format!("{benchmark_id}/");
        let cursor = cursor.map(|c| format!("{prefix}{c}"));
        let page = self.store.list(Collection::Items, &ListQuery { key_prefix: Some(prefix.clone()), cursor, limit, ..Default::default() })?;
        let next = page.next_cursor.map(|k| k.trim_start_matches(&prefix).to_string());
        Ok((page.records.into_iter().map(|r| r.body).collect(), next))
    }

    pub fn delete_item(&self, benchmark_id: &str, item_id: &str) -> Result<()> {
        self.get_item(benchmark_id, item_id)?;
        self.store.delete(Collection::Items, &Self::item_key(benchmark_id, item_id))?;
        Ok(())
    }

    /// Item with plugin-defined secrets removed.
    pub fn redact_item(&self, benchmark_id: &str, item: &Value) -> Value {
        match self.plugin_for(benchmark_id) {
            Ok(p) => p.redact_item(item),
            Err(_) => item.clone(),
        }
    }

    // ---- snapshots ----

    pub fn export_snapshot(&self, dir: &std::path::Path) -> Result<usize> {
        Ok(crate::store::export_snapshot(self.store.as_ref(), dir)?)
    }

    pub fn import_snapshot(&self, dir: &std::path::Path, force: bool) -> Result<usize> {
        let n = crate::store::import_snapshot(self.store.as_ref(), dir, force)?;
        self.clients.lock().clear();
        Ok(n)
    }
}
