//! Session model, storage, providers, benchmarks and reasoning trees for the
//! vista workbench.

pub mod bench;
pub mod model;
pub mod providers;
pub mod store;
pub mod tree;
pub mod workbench;

pub use model::{Message, Role, Session, SessionHeader, SessionId, SessionStatus};
pub use workbench::{Workbench, WorkbenchConfig, WorkbenchError};
