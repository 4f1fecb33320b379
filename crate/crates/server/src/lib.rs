//! HTTP/JSON service over the vista workbench.

pub mod api;
pub mod config;
pub mod error;
pub mod redact;

use std::sync::Arc;

use vista_core::store::{FileStore, SharedStore, SqliteStore, StoreError};
use vista_core::Workbench;

pub use api::{router, AppState};
pub use config::{Backend, Config, StorageConfig};
pub use error::{ApiError, ERROR_TABLE};

pub fn open_store(cfg: &StorageConfig) -> Result<SharedStore, StoreError> {
    if let Some(dir) = cfg.url.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(match cfg.backend {
        Backend::File => Arc::new(FileStore::open(&cfg.url)?),
        Backend::Sqlite => Arc::new(SqliteStore::open(&cfg.url)?),
    })
}

pub fn app_state(cfg: &Config) -> Result<AppState, StoreError> {
    let store = open_store(&cfg.storage)?;
    let wb = Arc::new(Workbench::new(store, cfg.workbench()));
    Ok(AppState::new(wb, cfg.credential_vars.clone(), cfg.reveal_enabled))
}
