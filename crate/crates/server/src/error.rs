use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use serde_json::{json, Value};
use vista_core::bench::BenchError;
use vista_core::providers::ProviderError;
use vista_core::store::StoreError;
use vista_core::tree::TreeError;
use vista_core::WorkbenchError;

/// Every error code the service emits, with its HTTP status.
pub const ERROR_TABLE: &[(&str, u16)] = &[
    ("UNKNOWN_ROUTE", 404),
    ("METHOD_NOT_ALLOWED", 405),
    ("UNKNOWN_SESSION", 404),
    ("UNKNOWN_BENCHMARK", 404),
    ("UNKNOWN_ITEM", 404),
    ("UNKNOWN_MODEL_CONFIG", 404),
    ("UNKNOWN_PROVIDER", 404),
    ("TREE_NOT_FOUND", 404),
    ("SESSION_TERMINAL", 409),
    ("SESSION_NOT_TERMINAL", 409),
    ("WRITE_CONFLICT", 409),
    ("VERSION_CONFLICT", 409),
    ("ALREADY_EXISTS", 409),
    ("STALE_TREE", 409),
    ("STORE_NOT_EMPTY", 409),
    ("INDEX_OUT_OF_RANGE", 400),
    ("BAD_REQUEST", 400),
    ("UNKNOWN_FORMAT", 400),
    ("UNKNOWN_GENERATOR", 400),
    ("VALIDATION_ERROR", 422),
    ("CORRUPT_SNAPSHOT", 422),
    ("EXTRACTION_FAILED", 422),
    ("GENERATION_EXHAUSTED", 422),
    ("UNSUPPORTED", 422),
    ("PROVIDER_UNAVAILABLE", 502),
    ("PROVIDER_REJECTED", 502),
    ("MALFORMED_PROVIDER_RESPONSE", 502),
    ("PROVIDER_TIMEOUT", 504),
    ("STORAGE_UNAVAILABLE", 503),
    ("INTERNAL", 500),
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApiError {
    pub status: u16,
    pub code: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<Value>,
}

impl ApiError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        let status = ERROR_TABLE
            .iter()
            .find(|(c, _)| *c == code)
            .map(|(_, s)| *s)
            .unwrap_or_else(|| panic!("error code {code} missing from ERROR_TABLE"));
        ApiError { status, code, message: message.into(), detail: None }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = Some(detail);
        self
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new("BAD_REQUEST", message)
    }

    pub fn unknown_route(method: &str, path: &str) -> Self {
        ApiError::new("UNKNOWN_ROUTE", format!("no route for {method} {path}"))
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError::new("INTERNAL", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            tracing::warn!(code = self.code, message = %self.message, "request failed");
        }
        (status, Json(&self)).into_response()
    }
}

fn provider_error(e: &ProviderError) -> ApiError {
    let msg = e.to_string();
    match e {
        ProviderError::Timeout(_) => ApiError::new("PROVIDER_TIMEOUT", msg),
        ProviderError::Rejected { status, .. } => {
            ApiError::new("PROVIDER_REJECTED", msg).with_detail(json!({ "upstream_status": status }))
        }
        ProviderError::Unavailable { attempts, .. } => {
            ApiError::new("PROVIDER_UNAVAILABLE", msg).with_detail(json!({ "attempts": attempts }))
        }
        ProviderError::Malformed(_) => ApiError::new("MALFORMED_PROVIDER_RESPONSE", msg),
        ProviderError::Validation(_) => ApiError::new("VALIDATION_ERROR", msg),
    }
}

fn store_error(e: &StoreError) -> ApiError {
    let msg = e.to_string();
    match e {
        StoreError::VersionConflict { expected, actual, .. } => {
            ApiError::new("VERSION_CONFLICT", msg).with_detail(json!({ "expected": expected, "actual": actual }))
        }
        StoreError::StorageUnavailable(_) | StoreError::Corrupt(_) => ApiError::new("STORAGE_UNAVAILABLE", msg),
        StoreError::CorruptSnapshot { key, .. } => {
            ApiError::new("CORRUPT_SNAPSHOT", msg).with_detail(json!({ "key": key }))
        }
        StoreError::NotEmpty => ApiError::new("STORE_NOT_EMPTY", msg),
    }
}

impl From<WorkbenchError> for ApiError {
    fn from(e: WorkbenchError) -> Self {
        let msg = e.to_string();
        match &e {
            WorkbenchError::UnknownSession(_) => ApiError::new("UNKNOWN_SESSION", msg),
            WorkbenchError::UnknownBenchmark(_) => ApiError::new("UNKNOWN_BENCHMARK", msg),
            WorkbenchError::UnknownItem(_) => ApiError::new("UNKNOWN_ITEM", msg),
            WorkbenchError::UnknownModelConfig(_) => ApiError::new("UNKNOWN_MODEL_CONFIG", msg),
            WorkbenchError::UnknownProvider(_) => ApiError::new("UNKNOWN_PROVIDER", msg),
            WorkbenchError::TreeNotFound { .. } => ApiError::new("TREE_NOT_FOUND", msg),
            WorkbenchError::StaleTree { .. } => ApiError::new("STALE_TREE", msg),
            WorkbenchError::SessionTerminal(_) => ApiError::new("SESSION_TERMINAL", msg),
            WorkbenchError::WriteConflict(_) => ApiError::new("WRITE_CONFLICT", msg),
            WorkbenchError::AlreadyExists { .. } => ApiError::new("ALREADY_EXISTS", msg),
            WorkbenchError::IndexOutOfRange { index, len } => {
                ApiError::new("INDEX_OUT_OF_RANGE", msg).with_detail(json!({ "index": index, "len": len }))
            }
            WorkbenchError::BadRequest(_) => ApiError::new("BAD_REQUEST", msg),
            WorkbenchError::Validation(_) => ApiError::new("VALIDATION_ERROR", msg),
            WorkbenchError::Store(s) => store_error(s),
            WorkbenchError::Provider(p) => provider_error(p),
            WorkbenchError::Tree(t) => match t {
                TreeError::UnknownFormat(_) => ApiError::new("UNKNOWN_FORMAT", msg),
                TreeError::UnknownGenerator(_) => ApiError::new("UNKNOWN_GENERATOR", msg),
                TreeError::ExtractionFailed { attempts, report } => ApiError::new("EXTRACTION_FAILED", msg)
                    .with_detail(json!({ "attempts": attempts, "report": report })),
                TreeError::InvalidDocument(_) => ApiError::new("VALIDATION_ERROR", msg),
                TreeError::Provider(p) => provider_error(p),
            },
            WorkbenchError::Bench(b) => match b {
                BenchError::IndexOutOfRange { .. } => ApiError::new("INDEX_OUT_OF_RANGE", msg),
                BenchError::InvalidItem(_) => ApiError::new("VALIDATION_ERROR", msg),
                BenchError::SessionNotTerminal => ApiError::new("SESSION_NOT_TERMINAL", msg),
                BenchError::GenerationExhausted { .. } => ApiError::new("GENERATION_EXHAUSTED", msg),
                BenchError::Unsupported(_) => ApiError::new("UNSUPPORTED", msg),
            },
        }
    }
}

impl From<TreeError> for ApiError {
    fn from(e: TreeError) -> Self {
        WorkbenchError::from(e).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use vista_core::store::Collection;
    use vista_core::tree::ValidationReport;

    #[test]
    fn codes_are_unique() {
        let codes: BTreeSet<&str> = ERROR_TABLE.iter().map(|(c, _)| *c).collect();
        assert_eq!(codes.len(), ERROR_TABLE.len());
    }

    fn code(e: WorkbenchError) -> (&'static str, u16) {
        let a = ApiError::from(e);
        (a.code, a.status)
    }

    #[test]
    fn module_errors_map_to_one_pair_each() {
        let cases = [
            (WorkbenchError::Provider(ProviderError::Timeout("t".into())), ("PROVIDER_TIMEOUT", 504)),
            (
                WorkbenchError::Provider(ProviderError::Unavailable { attempts: 3, last_error: "x".into() }),
                ("PROVIDER_UNAVAILABLE", 502),
            ),
            (WorkbenchError::Provider(ProviderError::Rejected { status: 401, body: "no".into() }), ("PROVIDER_REJECTED", 502)),
            (WorkbenchError::Provider(ProviderError::Malformed("m".into())), ("MALFORMED_PROVIDER_RESPONSE", 502)),
            (WorkbenchError::Store(StoreError::StorageUnavailable("down".into())), ("STORAGE_UNAVAILABLE", 503)),
            (WorkbenchError::Store(StoreError::NotEmpty), ("STORE_NOT_EMPTY", 409)),
            (
                WorkbenchError::Store(StoreError::CorruptSnapshot { key: "messages/a/0".into(), reason: "hash".into() }),
                ("CORRUPT_SNAPSHOT", 422),
            ),
            (WorkbenchError::Bench(BenchError::GenerationExhausted { attempts: 1000 }), ("GENERATION_EXHAUSTED", 422)),
            (WorkbenchError::Bench(BenchError::SessionNotTerminal), ("SESSION_NOT_TERMINAL", 409)),
            (
                WorkbenchError::Tree(TreeError::ExtractionFailed { attempts: vec![], report: ValidationReport::default() }),
                ("EXTRACTION_FAILED", 422),
            ),
            (
                WorkbenchError::AlreadyExists { collection: Collection::Sessions, key: "s".into() },
                ("ALREADY_EXISTS", 409),
            ),
            (WorkbenchError::Tree(TreeError::Provider(ProviderError::Timeout("t".into()))), ("PROVIDER_TIMEOUT", 504)),
            (WorkbenchError::Bench(BenchError::Unsupported("item generation")), ("UNSUPPORTED", 422)),
        ];
        for (e, want) in cases {
            assert_eq!(code(e.clone()), want, "{e:?}");
        }
    }

    #[test]
    fn internal_is_500() {
        let e = ApiError::internal("worker panicked");
        assert_eq!((e.code, e.status), ("INTERNAL", 500));
    }

    #[test]
    fn body_shape() {
        let e = ApiError::new("UNKNOWN_SESSION", "unknown session x");
        let v = serde_json::to_value(&e).unwrap();
        assert_eq!(v, json!({"status": 404, "code": "UNKNOWN_SESSION", "message": "unknown session x"}));
    }
}
