//! Response hygiene: hidden item fields and credential values.

use std::collections::BTreeSet;

use axum::body::{to_bytes, Body};
use axum::extract::{Request, State};
use axum::http::header::CONTENT_LENGTH;
use axum::middleware::Next;
use axum::response::Response;
use parking_lot::RwLock;

pub const MASK: &str = "[REDACTED]";

/// Credential values shorter than this are not masked; they would match
/// ordinary text.
const MIN_SECRET_LEN: usize = 4;

/// Masks the current values of a set of credential variables.
#[derive(Debug, Default)]
pub struct Redactor {
    vars: RwLock<BTreeSet<String>>,
}

impl Redactor {
    pub fn new(vars: impl IntoIterator<Item = String>) -> Self {
        Redactor { vars: RwLock::new(vars.into_iter().collect()) }
    }

    /// Starts masking `var` (an `auth_ref`).
    pub fn watch(&self, var: &str) {
        if !self.vars.read().contains(var) {
            self.vars.write().insert(var.to_string());
        }
    }

    /// Values are read at call time so rotated credentials are covered.
    fn secrets(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .vars
            .read()
            .iter()
            .filter_map(|v| std::env::var(v).ok())
            .filter(|s| s.len() >= MIN_SECRET_LEN)
            .collect();
        // Longest first so a secret containing another is masked whole.
        out.sort_by_key(|s| std::cmp::Reverse(s.len()));
        out
    }

    pub fn scrub(&self, text: &str) -> Option<String> {
        let secrets = self.secrets();
        if !secrets.iter().any(|s| text.contains(s.as_str())) {
            return None;
        }
        let mut out = text.to_string();
        for s in &secrets {
            out = out.replace(s.as_str(), MASK);
        }
        Some(out)
    }
}

/// Middleware: rewrites any response body that contains a credential value.
pub async fn scrub_responses(State(redactor): State<std::sync::Arc<Redactor>>, req: Request, next: Next) -> Response {
    let resp = next.run(req).await;
    let (mut parts, body) = resp.into_parts();
    let bytes = match to_bytes(body, usize::MAX).await {
        Ok(b) => b,
        Err(e) => {
            tracing::warn!(error = %e, "could not buffer response body");
            return Response::from_parts(parts, Body::empty());
        }
    };
    let text = String::from_utf8_lossy(&bytes);
    match redactor.scrub(&text) {
        Some(clean) => {
            tracing::warn!("credential value removed from a response");
            parts.headers.remove(CONTENT_LENGTH);
            Response::from_parts(parts, Body::from(clean))
        }
        None => Response::from_parts(parts, Body::from(bytes)),
    }
}
