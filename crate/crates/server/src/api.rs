//! HTTP route table and handlers.

use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::header::{CONTENT_TYPE, IF_MATCH, LOCATION};
use axum::http::{HeaderMap, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{middleware, Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use vista_core::model::{Role, SessionStatus};
use vista_core::providers::{ModelConfig, ProviderSpec};
use vista_core::tree::{export_tree, Generator, TreeFormat};
use vista_core::workbench::{BenchmarkRecord, EditMode, SessionFilter, TreeRequest};
use vista_core::{SessionId, Workbench, WorkbenchError};

use crate::error::ApiError;
use crate::redact::{scrub_responses, Redactor};

#[derive(Clone)]
pub struct AppState {
    pub wb: Arc<Workbench>,
    pub redactor: Arc<Redactor>,
    pub reveal_enabled: bool,
}

impl AppState {
    pub fn new(wb: Arc<Workbench>, credential_vars: Vec<String>, reveal_enabled: bool) -> Self {
        let redactor = Arc::new(Redactor::new(credential_vars));
        if let Ok((providers, _)) = wb.list_providers(None, None) {
            for p in providers.iter().filter_map(|p| p.auth_ref.as_deref()) {
                redactor.watch(p);
            }
        }
        AppState { wb, redactor, reveal_enabled }
    }
}

type ApiResult<T = Response> = Result<T, ApiError>;

/// Runs a workbench call off the async executor.
async fn run<T, F>(state: &AppState, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Workbench) -> Result<T, WorkbenchError> + Send + 'static,
{
    let wb = state.wb.clone();
    tokio::task::spawn_blocking(move || f(&wb))
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
        .map_err(ApiError::from)
}

fn body<T>(r: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    match r {
        Ok(Json(v)) => Ok(v),
        Err(JsonRejection::JsonDataError(e)) => Err(ApiError::new("VALIDATION_ERROR", e.body_text())),
        Err(e) => Err(ApiError::bad_request(e.body_text())),
    }
}

fn query<T>(r: Result<Query<T>, QueryRejection>) -> ApiResult<T> {
    r.map(|Query(q)| q).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn path<T>(r: Result<Path<T>, PathRejection>) -> ApiResult<T> {
    r.map(|Path(p)| p).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn if_match(headers: &HeaderMap) -> ApiResult<Option<u64>> {
    match headers.get(IF_MATCH) {
        None => Ok(None),
        Some(v) => v
            .to_str()
            .ok()
            .map(|s| s.trim().trim_start_matches("W/").trim_matches('"'))
            .and_then(|s| s.parse().ok())
            .map(Some)
            .ok_or_else(|| ApiError::bad_request("If-Match must hold a record version")),
    }
}

fn ok<T: Serialize>(v: T) -> Response {
    Json(v).into_response()
}

fn created<T: Serialize>(location: String, v: T) -> Response {
    (StatusCode::CREATED, [(LOCATION, location)], Json(v)).into_response()
}

fn no_content() -> Response {
    StatusCode::NO_CONTENT.into_response()
}

#[derive(Serialize)]
struct ListBody<T> {
    items: Vec<T>,
    next_cursor: Option<String>,
}

fn list<T: Serialize>((items, next_cursor): (Vec<T>, Option<String>)) -> Response {
    ok(ListBody { items, next_cursor })
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ListParams {
    cursor: Option<String>,
    limit: Option<usize>,
}

fn same_id(path_id: &str, body_id: &str) -> ApiResult<()> {
    if path_id == body_id {
        Ok(())
    } else {
        Err(ApiError::bad_request(format!("body id {body_id:?} does not match path id {path_id:?}")))
    }
}

pub fn router(state: AppState) -> Router {
    let redactor = state.redactor.clone();
    Router::new()
        .route("/health", get(health))
        .route("/providers", get(list_providers).post(create_provider))
        .route("/providers/:id", get(get_provider).put(put_provider).delete(delete_provider))
        .route("/providers/:id/probe", post(probe_provider))
        .route("/models", get(list_models).post(create_model))
        .route("/models/:id", get(get_model).put(put_model).delete(delete_model))
        .route("/benchmarks", get(list_benchmarks).post(create_benchmark))
        .route("/benchmarks/:id", get(get_benchmark).put(put_benchmark).delete(delete_benchmark))
        .route("/benchmarks/:id/items", get(list_items).post(create_item))
        .route("/benchmarks/:id/items/generate", post(generate_item))
        .route("/benchmarks/:id/items/:item_id", get(get_item).put(put_item).delete(delete_item))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/import", post(import_session))
        .route("/sessions/:id", get(get_session))
        .route("/sessions/:id/step", post(step_session))
        .route("/sessions/:id/abort", post(abort_session))
        .route("/sessions/:id/messages", post(append_message))
        .route("/sessions/:id/messages/:idx/edit", post(edit_message))
        .route("/sessions/:id/diff/:other", get(diff_sessions))
        .route("/sessions/:id/tree", get(get_tree).post(generate_tree))
        .route("/sessions/:id/export", get(export_session))
        .route("/sessions/:id/audit", get(audit_events))
        .route("/sessions/:id/score", get(score_session))
        .fallback(unknown_route)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(middleware::from_fn_with_state(redactor, scrub_responses))
        .with_state(state)
}

async fn unknown_route(method: Method, uri: Uri) -> ApiError {
    ApiError::unknown_route(method.as_str(), uri.path())
}

async fn method_not_allowed(method: Method, uri: Uri) -> ApiError {
    ApiError::new("METHOD_NOT_ALLOWED", format!("{method} is not supported on {}", uri.path()))
}

async fn health() -> Response {
    ok(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

// ---- providers ----

async fn list_providers(State(s): State<AppState>, q: Result<Query<ListParams>, QueryRejection>) -> ApiResult {
    let q = query(q)?;
    Ok(list(run(&s, move |wb| wb.list_providers(q.cursor, q.limit)).await?))
}

async fn create_provider(State(s): State<AppState>, b: Result<Json<ProviderSpec>, JsonRejection>) -> ApiResult {
    let spec = body(b)?;
    if let Some(var) = &spec.auth_ref {
        s.redactor.watch(var);
    }
    let v = run(&s, move |wb| wb.put_provider(spec, true, None)).await?;
    Ok(created(format!("/providers/{}", v.value.id), v))
}

async fn get_provider(State(s): State<AppState>, p: Result<Path<String>, PathRejection>) -> ApiResult {
    let id = path(p)?;
    Ok(ok(run(&s, move |wb| wb.get_provider(&id)).await?))
}

async fn put_provider(
    State(s): State<AppState>,
    p: Result<Path<String>, PathRejection>,
    headers: HeaderMap,
    b: Result<Json<ProviderSpec>, JsonRejection>,
) -> ApiResult {
    let id = path(p)?;
    let spec = body(b)?;
    same_id(&id, &spec.id)?;
    let expected = if_match(&headers)?;
    if let Some(var) = &spec.auth_ref {
        s.redactor.watch(var);
    }
    Ok(ok(run(&s, move |wb| wb.put_provider(spec, false, expected)).await?))
}

async fn delete_provider(State(s): State<AppState>, p: Result<Path<String>, PathRejection>) -> ApiResult {
    let id = path(p)?;
    run(&s, move |wb| wb.delete_provider(&id)).await?;
    Ok(no_content())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbeParams {
    model_config_id: Option<String>,
}

async fn probe_provider(
    State(s): State<AppState>,
    p: Result<Path<String>, PathRejection>,
    q: Result<Query<ProbeParams>, QueryRejection>,
) -> ApiResult {
    let id = path(p)?;
    let q = query(q)?;
    Ok(ok(run(&s, move |wb| wb.probe_provider(&id, q.model_config_id.as_deref())).await?))
}

// ---- model configs ----

async fn list_models(State(s): State<AppState>, q: Result<Query<ListParams>, QueryRejection>) -> ApiResult {
    let q = query(q)?;
    Ok(list(run(&s, move |wb| wb.list_model_configs(q.cursor, q.limit)).await?))
}

async fn create_model(State(s): State<AppState>, b: Result<Json<ModelConfig>, JsonRejection>) -> ApiResult {
    let config = body(b)?;
    let v = run(&s, move |wb| wb.put_model_config(config, true, None)).await?;
    Ok(created(format!("/models/{}", v.value.id), v))
}

async fn get_model(State(s): State<AppState>, p: Result<Path<String>, PathRejection>) -> ApiResult {
    let id = path(p)?;
    Ok(ok(run(&s, move |wb| wb.get_model_config(&id)).await?))
}

async fn put_model(
    State(s): State<AppState>,
    p: Result<Path<String>, PathRejection>,
    headers: HeaderMap,
    b: Result<Json<ModelConfig>, JsonRejection>,
) -> ApiResult {
    let id = path(p)?;
    let config = body(b)?;
    same_id(&id, &config.id)?;
    let expected = if_match(&headers)?;
    Ok(ok(run(&s, move |wb| wb.put_model_config(config, false, expected)).await?))
}

async fn delete_model(State(s): State<AppState>, p: Result<Path<String>, PathRejection>) -> ApiResult {
    let id = path(p)?;
    run(&s, move |wb| wb.delete_model_config(&id)).await?;
    Ok(no_content())
}

// ---- benchmarks ----

async fn list_benchmarks(State(s): State<AppState>) -> ApiResult {
    Ok(list((run(&s, |wb| wb.list_benchmarks()).await?, None)))
}

async fn create_benchmark(State(s): State<AppState>, b: Result<Json<BenchmarkRecord>, JsonRejection>) -> ApiResult {
    let record = body(b)?;
    let r = run(&s, move |wb| wb.put_benchmark(record, true)).await?;
    Ok(created(format!("/benchmarks/{}", r.id), r))
}

async fn get_benchmark(State(s): State<AppState>, p: Result<Path<String>, PathRejection>) -> ApiResult {
    let id = path(p)?;
    Ok(ok(run(&s, move |wb| wb.get_benchmark(&id)).await?))
}

async fn put_benchmark(
    State(s): State<AppState>,
    p: Result<Path<String>, PathRejection>,
    b: Result<Json<BenchmarkRecord>, JsonRejection>,
) -> ApiResult {
    let id = path(p)?;
    let record = body(b)?;
    same_id(&id, &record.id)?;
    Ok(ok(run(&s, move |wb| wb.put_benchmark(record, false)).await?))
}

async fn delete_benchmark(State(s): State<AppState>, p: Result<Path<String>, PathRejection>) -> ApiResult {
    let id = path(p)?;
    run(&s, move |wb| wb.delete_benchmark(&id)).await?;
    Ok(no_content())
}

// ---- items ----

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemParams {
    #[serde(default)]
    reveal: bool,
    cursor: Option<String>,
    limit: Option<usize>,
}

impl AppState {
    /// Hidden fields stay hidden unless both the request and the config allow them.
    fn item_view(&self, wb: &Workbench, benchmark_id: &str, item: &Value, reveal: bool) -> Value {
        if reveal && self.reveal_enabled {
            item.clone()
        } else {
            wb.redact_item(benchmark_id, item)
        }
    }
}

async fn list_items(
    State(s): State<AppState>,
    p: Result<Path<String>, PathRejection>,
    q: Result<Query<ItemParams>, QueryRejection>,
) -> ApiResult {
    let bid = path(p)?;
    let q = query(q)?;
    let st = s.clone();
    Ok(list(
        run(&s, move |wb| {
            let (items, next) = wb.list_items(&bid, q.cursor, q.limit)?;
            Ok((items.iter().map(|i| st.item_view(wb, &bid, i, q.reveal)).collect::<Vec<_>>(), next))
        })
        .await?,
    ))
}

fn item_id(item: &Value) -> String {
    item.get("id").and_then(Value::as_str).unwrap_or_default().to_string()
}

async fn create_item(
    State(s): State<AppState>,
    p: Result<Path<String>, PathRejection>,
    b: Result<Json<Value>, JsonRejection>,
) -> ApiResult {
    let bid = path(p)?;
    let item = body(b)?;
    let st = s.clone();
    let (loc, v) = run(&s, move |wb| {
        let stored = wb.put_item(&bid, item, true)?;
        Ok((format!("/benchmarks/{bid}/items/{}", item_id(&stored)), st.item_view(wb, &bid, &stored, false)))
    })
    .await?;
    Ok(created(loc, v))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateBody {
    item_id: Option<String>,
    seed: u64,
    #[serde(default)]
    params: Value,
}

async fn generate_item(
    State(s): State<AppState>,
    p: Result<Path<String>, PathRejection>,
    b: Result<Json<GenerateBody>, JsonRejection>,
) -> ApiResult {
    let bid = path(p)?;
    let g = body(b)?;
    let st = s.clone();
    let (loc, v) = run(&s, move |wb| {
        let params = if g.params.is_null() { json!({}) } else { g.params };
        let stored = wb.generate_item(&bid, g.item_id.as_deref(), g.seed, &params)?;
        Ok((format!("/benchmarks/{bid}/items/{}", item_id(&stored)), st.item_view(wb, &bid, &stored, false)))
    })
    .await?;
    Ok(created(loc, v))
}

async fn get_item(
    State(s): State<AppState>,
    p: Result<Path<(String, String)>, PathRejection>,
    q: Result<Query<ItemParams>, QueryRejection>,
) -> ApiResult {
    let (bid, iid) = path(p)?;
    let q = query(q)?;
    let st = s.clone();
    Ok(ok(run(&s, move |wb| Ok(st.item_view(wb, &bid, &wb.get_item(&bid, &iid)?, q.reveal))).await?))
}

async fn put_item(
    State(s): State<AppState>,
    p: Result<Path<(String, String)>, PathRejection>,
    b: Result<Json<Value>, JsonRejection>,
) -> ApiResult {
    let (bid, iid) = path(p)?;
    let item = body(b)?;
    same_id(&iid, &item_id(&item))?;
    let st = s.clone();
    Ok(ok(run(&s, move |wb| Ok(st.item_view(wb, &bid, &wb.put_item(&bid, item, false)?, false))).await?))
}

async fn delete_item(State(s): State<AppState>, p: Result<Path<(String, String)>, PathRejection>) -> ApiResult {
    let (bid, iid) = path(p)?;
    run(&s, move |wb| wb.delete_item(&bid, &iid)).await?;
    Ok(no_content())
}

// ---- sessions ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    benchmark_id: String,
    item_id: String,
    model_config_id: String,
}

async fn create_session(State(s): State<AppState>, b: Result<Json<CreateSession>, JsonRejection>) -> ApiResult {
    let c = body(b)?;
    let view = run(&s, move |wb| {
        let session = wb.create_session(&c.benchmark_id, &c.item_id, &c.model_config_id)?;
        wb.get_session(session.id())
    })
    .await?;
    Ok(created(format!("/sessions/{}", view.session.id()), view))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionParams {
    parent_id: Option<String>,
    benchmark_id: Option<String>,
    status: Option<SessionStatus>,
    cursor: Option<String>,
    limit: Option<usize>,
}

async fn list_sessions(State(s): State<AppState>, q: Result<Query<SessionParams>, QueryRejection>) -> ApiResult {
    let q = query(q)?;
    let filter = SessionFilter {
        parent_id: q.parent_id,
        benchmark_id: q.benchmark_id,
        status: q.status,
        cursor: q.cursor,
        limit: q.limit,
    };
    Ok(list(run(&s, move |wb| wb.list_sessions(&filter)).await?))
}

fn session_id(p: Result<Path<String>, PathRejection>) -> ApiResult<SessionId> {
    path(p).map(SessionId)
}

async fn get_session(State(s): State<AppState>, p: Result<Path<String>, PathRejection>) -> ApiResult {
    let id = session_id(p)?;
    Ok(ok(run(&s, move |wb| wb.get_session(&id)).await?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepParams {
    #[serde(default = "one")]
    steps: u32,
}

fn one() -> u32 {
    1
}

async fn step_session(
    State(s): State<AppState>,
    p: Result<Path<String>, PathRejection>,
    q: Result<Query<StepParams>, QueryRejection>,
) -> ApiResult {
    let id = session_id(p)?;
    let q = query(q)?;
    Ok(ok(run(&s, move |wb| wb.step_session(&id, q.steps)).await?))
}

async fn abort_session(State(s): State<AppState>, p: Result<Path<String>, PathRejection>) -> ApiResult {
    let id = session_id(p)?;
    Ok(ok(run(&s, move |wb| {
        wb.abort_session(&id)?;
        wb.get_session(&id)
    })
    .await?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AppendBody {
    role: Role,
    content: String,
}

async fn append_message(
    State(s): State<AppState>,
    p: Result<Path<String>, PathRejection>,
    b: Result<Json<AppendBody>, JsonRejection>,
) -> ApiResult {
    let id = session_id(p)?;
    let a = body(b)?;
    let loc = format!("/sessions/{id}");
    let m = run(&s, move |wb| wb.append_message(&id, a.role, &a.content, Default::default())).await?;
    Ok(created(loc, m))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EditBody {
    mode: EditMode,
    content: String,
    #[serde(default)]
    override_model_config_id: Option<String>,
}

async fn edit_message(
    State(s): State<AppState>,
    p: Result<Path<(String, u64)>, PathRejection>,
    b: Result<Json<EditBody>, JsonRejection>,
) -> ApiResult {
    let (id, idx) = path(p)?;
    let e = body(b)?;
    let id = SessionId(id);
    let view = run(&s, move |wb| {
        let out = wb.edit_message(&id, idx, &e.content, e.mode, e.override_model_config_id.as_deref())?;
        wb.get_session(out.id())
    })
    .await?;
    match e.mode {
        EditMode::Fork => Ok(created(format!("/sessions/{}", view.session.id()), view)),
        EditMode::InPlace => Ok(ok(view)),
    }
}

async fn diff_sessions(State(s): State<AppState>, p: Result<Path<(String, String)>, PathRejection>) -> ApiResult {
    let (l, r) = path(p)?;
    Ok(ok(run(&s, move |wb| wb.diff_sessions(&SessionId(l), &SessionId(r))).await?))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeParams {
    generator: Option<String>,
    format: Option<String>,
    #[serde(default)]
    force: bool,
    analysis_model: Option<String>,
}

impl TreeParams {
    fn parse(&self) -> ApiResult<(Generator, TreeFormat)> {
        let generator = self.generator.as_deref().unwrap_or("deterministic").parse::<Generator>()?;
        let format = self.format.as_deref().unwrap_or("json").parse::<TreeFormat>()?;
        Ok((generator, format))
    }
}

fn tree_response(tree: &vista_core::tree::ReasoningTree, format: TreeFormat) -> Response {
    ([(CONTENT_TYPE, format.content_type())], export_tree(tree, format)).into_response()
}

async fn get_tree(
    State(s): State<AppState>,
    p: Result<Path<String>, PathRejection>,
    q: Result<Query<TreeParams>, QueryRejection>,
) -> ApiResult {
    let id = session_id(p)?;
    let q = query(q)?;
    if q.force || q.analysis_model.is_some() {
        return Err(ApiError::bad_request("force and analysis_model apply to POST only"));
    }
    let (generator, format) = q.parse()?;
    let tree = run(&s, move |wb| wb.get_tree(&id, generator)).await?;
    Ok(tree_response(&tree, format))
}

async fn generate_tree(
    State(s): State<AppState>,
    p: Result<Path<String>, PathRejection>,
    q: Result<Query<TreeParams>, QueryRejection>,
) -> ApiResult {
    let id = session_id(p)?;
    let q = query(q)?;
    let (generator, format) = q.parse()?;
    let req = TreeRequest { generator, analysis_model: q.analysis_model, force: q.force };
    let tree = run(&s, move |wb| wb.generate_tree(&id, &req)).await?;
    Ok(tree_response(&tree, format))
}

async fn export_session(State(s): State<AppState>, p: Result<Path<String>, PathRejection>) -> ApiResult {
    let id = session_id(p)?;
    let text = run(&s, move |wb| wb.export_session(&id)).await?;
    Ok(([(CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}

async fn import_session(State(s): State<AppState>, text: String) -> ApiResult {
    let view = run(&s, move |wb| {
        let session = wb.import_session(&text)?;
        wb.get_session(session.id())
    })
    .await?;
    Ok(created(format!("/sessions/{}", view.session.id()), view))
}

async fn audit_events(State(s): State<AppState>, p: Result<Path<String>, PathRejection>) -> ApiResult {
    let id = session_id(p)?;
    Ok(list((run(&s, move |wb| wb.audit_events(&id)).await?, None)))
}

async fn score_session(State(s): State<AppState>, p: Result<Path<String>, PathRejection>) -> ApiResult {
    let id = session_id(p)?;
    Ok(ok(run(&s, move |wb| wb.score_session(&id)).await?))
}
