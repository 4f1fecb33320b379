//! Service configuration: one TOML file plus environment overrides.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use vista_core::providers::CallLimiter;
use vista_core::WorkbenchConfig;

pub const ENV_CONFIG: &str = "VISTA_CONFIG";
pub const ENV_LISTEN: &str = "VISTA_LISTEN";
pub const ENV_STORAGE_BACKEND: &str = "VISTA_STORAGE_BACKEND";
pub const ENV_STORAGE_URL: &str = "VISTA_STORAGE_URL";
pub const ENV_REMOTE_CONCURRENCY: &str = "VISTA_REMOTE_CONCURRENCY";
pub const ENV_REVEAL_ENABLED: &str = "VISTA_REVEAL_ENABLED";
/// Comma-separated names of environment variables holding credentials.
pub const ENV_CREDENTIAL_VARS: &str = "VISTA_CREDENTIAL_VARS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    File,
    Sqlite,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorageConfig {
    pub backend: Backend,
    /// File path for both backends.
    pub url: PathBuf,
}

impl Default for StorageConfig {
    fn default() -> Self {
        StorageConfig { backend: Backend::File, url: PathBuf::from("vista-store.jsonl") }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub listen: SocketAddr,
    pub storage: StorageConfig,
    pub remote_concurrency: usize,
    /// Allows `?reveal=true` to return hidden item fields.
    pub reveal_enabled: bool,
    /// Environment variables whose values never appear in responses.
    pub credential_vars: Vec<String>,
    /// Wait for a busy session before answering WRITE_CONFLICT.
    pub lock_wait_ms: u64,
    pub max_repairs: u32,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            storage: StorageConfig::default(),
            remote_concurrency: CallLimiter::DEFAULT_MAX,
            reveal_enabled: false,
            credential_vars: Vec::new(),
            lock_wait_ms: 0,
            max_repairs: WorkbenchConfig::default().max_repairs,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{var}: {reason}")]
    Env { var: &'static str, reason: String },
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })
    }

    /// File named by `VISTA_CONFIG` (if any), then environment overrides.
    pub fn load() -> Result<Config, ConfigError> {
        let lookup = |k: &str| std::env::var(k).ok();
        let mut cfg = match lookup(ENV_CONFIG) {
            Some(p) => Config::from_file(Path::new(&p))?,
            None => Config::default(),
        };
        cfg.apply_env(lookup)?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(var: &'static str, v: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            v.trim().parse().map_err(|e: T::Err| ConfigError::Env { var, reason: e.to_string() })
        }
        if let Some(v) = lookup(ENV_LISTEN) {
            self.listen = parse(ENV_LISTEN, &v)?;
        }
        if let Some(v) = lookup(ENV_STORAGE_BACKEND) {
            self.storage.backend = match v.trim() {
                "file" => Backend::File,
                "sqlite" => Backend::Sqlite,
                other => {
                    return Err(ConfigError::Env {
                        var: ENV_STORAGE_BACKEND,
                        reason: format!("expected file or sqlite, got {other:?}"),
                    })
                }
            };
        }
        if let Some(v) = lookup(ENV_STORAGE_URL) {
            self.storage.url = PathBuf::from(v);
        }
        if let Some(v) = lookup(ENV_REMOTE_CONCURRENCY) {
            self.remote_concurrency = parse(ENV_REMOTE_CONCURRENCY, &v)?;
        }
        if let Some(v) = lookup(ENV_REVEAL_ENABLED) {
            self.reveal_enabled = parse(ENV_REVEAL_ENABLED, &v)?;
        }
        if let Some(v) = lookup(ENV_CREDENTIAL_VARS) {
            self.credential_vars = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        }
        Ok(())
    }

    pub fn workbench(&self) -> WorkbenchConfig {
        WorkbenchConfig {
            lock_wait: Duration::from_millis(self.lock_wait_ms),
            remote_concurrency: self.remote_concurrency.max(1),
            max_repairs: self.max_repairs,
        }
    }
}
