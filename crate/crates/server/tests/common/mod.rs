#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use regex::Regex;
use reqwest::blocking::Client;
use reqwest::header::HeaderMap;
use serde_json::{json, Value};
use tempfile::TempDir;
use vista_server::{app_state, router, AppState, Backend, Config};

pub const BENCH: &str = "deduction-v1";

/// The full route table as `METHOD pattern`.
pub const ROUTES: &[&str] = &[
    "GET /health",
    "GET /providers",
    "POST /providers",
    "GET /providers/{id}",
    "PUT /providers/{id}",
    "DELETE /providers/{id}",
    "POST /providers/{id}/probe",
    "GET /models",
    "POST /models",
    "GET /models/{id}",
    "PUT /models/{id}",
    "DELETE /models/{id}",
    "GET /benchmarks",
    "POST /benchmarks",
    "GET /benchmarks/{id}",
    "PUT /benchmarks/{id}",
    "DELETE /benchmarks/{id}",
    "GET /benchmarks/{id}/items",
    "POST /benchmarks/{id}/items",
    "POST /benchmarks/{id}/items/generate",
    "GET /benchmarks/{id}/items/{item_id}",
    "PUT /benchmarks/{id}/items/{item_id}",
    "DELETE /benchmarks/{id}/items/{item_id}",
    "GET /sessions",
    "POST /sessions",
    "POST /sessions/import",
    "GET /sessions/{id}",
    "POST /sessions/{id}/step",
    "POST /sessions/{id}/abort",
    "POST /sessions/{id}/messages",
    "POST /sessions/{id}/messages/{idx}/edit",
    "GET /sessions/{id}/diff/{other}",
    "GET /sessions/{id}/tree",
    "POST /sessions/{id}/tree",
    "GET /sessions/{id}/export",
    "GET /sessions/{id}/audit",
    "GET /sessions/{id}/score",
];

/// Codes that no request can provoke against a healthy store with the
/// built-in benchmark; their mapping is covered by unit tests in the
/// server's error module.
pub const MAPPING_ONLY: &[&str] = &["PROVIDER_TIMEOUT", "STORE_NOT_EMPTY", "STORAGE_UNAVAILABLE", "UNSUPPORTED", "INTERNAL"];

pub struct Server {
    pub base: String,
    pub state: AppState,
    pub client: Client,
    pub dir: TempDir,
}

#[derive(Clone, Debug, Default)]
pub struct Options {
    pub sqlite: bool,
    pub reveal_enabled: bool,
    pub credential_vars: Vec<String>,
    pub lock_wait_ms: u64,
}

impl Server {
    pub fn start() -> Server {
        Server::with(Options::default())
    }

    pub fn with(opts: Options) -> Server {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = Config::default();
        cfg.storage.backend = if opts.sqlite { Backend::Sqlite } else { Backend::File };
        cfg.storage.url = dir.path().join(if opts.sqlite { "store.db" } else { "store.jsonl" });
        cfg.reveal_enabled = opts.reveal_enabled;
        cfg.credential_vars = opts.credential_vars;
        cfg.lock_wait_ms = opts.lock_wait_ms;
        let state = app_state(&cfg).unwrap();
        let base = serve_in_background(state.clone());
        let client = Client::builder().timeout(Duration::from_secs(60)).build().unwrap();
        Server { base, state, client, dir }
    }

    pub fn send(&self, method: &str, path: &str, body: Option<&Value>) -> Reply {
        self.send_with(method, path, body, &[])
    }

    pub fn send_with(&self, method: &str, path: &str, body: Option<&Value>, headers: &[(&str, String)]) -> Reply {
        let m = reqwest::Method::from_bytes(method.as_bytes()).unwrap();
        let mut req = self.client.request(m, format!("{}{}", self.base, path));
        if let Some(b) = body {
            req = req.json(b);
        }
        for (k, v) in headers {
            req = req.header(*k, v);
        }
        Reply::from(req.send().unwrap())
    }

    pub fn send_text(&self, method: &str, path: &str, text: &str) -> Reply {
        let m = reqwest::Method::from_bytes(method.as_bytes()).unwrap();
        let req = self
            .client
            .request(m, format!("{}{}", self.base, path))
            .header("content-type", "application/x-ndjson")
            .body(text.to_string());
        Reply::from(req.send().unwrap())
    }

    pub fn get(&self, path: &str) -> Reply {
        self.send("GET", path, None)
    }

    pub fn post(&self, path: &str, body: Value) -> Reply {
        self.send("POST", path, Some(&body))
    }

    pub fn post_empty(&self, path: &str) -> Reply {
        self.send("POST", path, None)
    }

    /// Registers a scripted provider and a model config, both named `id`.
    pub fn scripted_model(&self, id: &str, script: Value) -> Value {
        let mut script = script;
        script["id"] = json!(id);
        self.post("/providers", json!({"id": id, "kind": "scripted", "script": script})).expect(201);
        self.post("/models", json!({"id": id, "provider_id": id, "model_name": "scripted"})).expect(201).json()
    }

    /// Scripted model answering the n-th turn with `replies[n-1]`.
    pub fn sequence_model(&self, id: &str, replies: &[&str], default: &str) -> Value {
        let rules: Vec<Value> = replies
            .iter()
            .enumerate()
            .map(|(i, r)| json!({"matcher": "nth_call", "matcher_arg": (i + 1).to_string(), "response_text": r}))
            .collect();
        self.scripted_model(id, json!({"rules": rules, "default_response": default}))
    }

    pub fn put_item(&self, item: Value) {
        self.post(&format!("/benchmarks/{BENCH}/items"), item).expect(201);
    }

    pub fn create_session(&self, item_id: &str, model: &str) -> String {
        let r = self
            .post("/sessions", json!({"benchmark_id": BENCH, "item_id": item_id, "model_config_id": model}))
            .expect(201);
        r.json()["id"].as_str().unwrap().to_string()
    }
}

fn serve_in_background(state: AppState) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
        rt.block_on(async move {
            let l = tokio::net::TcpListener::from_std(listener).unwrap();
            axum::serve(l, router(state)).await.unwrap();
        });
    });
    format!("http://{addr}")
}

pub struct Reply {
    pub status: u16,
    pub headers: HeaderMap,
    pub text: String,
}

impl From<reqwest::blocking::Response> for Reply {
    fn from(r: reqwest::blocking::Response) -> Self {
        let status = r.status().as_u16();
        let headers = r.headers().clone();
        let text = r.text().unwrap();
        Reply { status, headers, text }
    }
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.text).unwrap_or_else(|e| panic!("not JSON ({e}): {}", self.text))
    }

    #[track_caller]
    pub fn expect(self, status: u16) -> Reply {
        assert_eq!(self.status, status, "unexpected status, body: {}", self.text);
        self
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.get(name).and_then(|v| v.to_str().ok())
    }

    pub fn is_json(&self) -> bool {
        self.header("content-type").is_some_and(|c| c.starts_with("application/json"))
    }

    #[track_caller]
    pub fn error_code(&self) -> String {
        let v = self.json();
        assert_valid("ApiError", &v);
        assert_eq!(v["status"], json!(self.status));
        v["code"].as_str().unwrap().to_string()
    }
}

pub fn item_001() -> Value {
    json!({
        "id": "item-001",
        "code_length": 3,
        "alphabet": [1, 2, 3, 4, 5],
        "hidden_code": [2, 4, 5],
        "verifiers": [
            {"index": 0, "predicate_id": "sum_even", "params": {}, "description": "The sum of the digits is even."},
            {"index": 1, "predicate_id": "digit_i_odd", "params": {"i": 1}, "description": "Digit 1 is odd."},
            {"index": 2, "predicate_id": "all_distinct", "params": {}, "description": "All digits are different."},
            {"index": 3, "predicate_id": "digit_i_is_max", "params": {"i": 3},
             "description": "Digit 3 is at least as large as every other digit."}
        ],
        "round_limit": 10
    })
}

// ---- schemas ----

pub const SCHEMA_TEXT: &str = include_str!("../../schemas/api.json");

fn schema_doc() -> &'static Value {
    static DOC: OnceLock<Value> = OnceLock::new();
    DOC.get_or_init(|| serde_json::from_str(SCHEMA_TEXT).unwrap())
}

pub fn validator(def: &str) -> jsonschema::JSONSchema {
    let mut doc = schema_doc().clone();
    assert!(doc["$defs"].get(def).is_some(), "schema has no definition {def}");
    doc["$ref"] = json!(format!("#/$defs/{def}"));
    jsonschema::JSONSchema::options()
        .with_draft(jsonschema::Draft::Draft202012)
        .should_validate_formats(true)
        .compile(&doc)
        .unwrap_or_else(|e| panic!("schema {def} does not compile: {e}"))
}

pub fn schema_errors(def: &str, v: &Value) -> Vec<String> {
    let s = validator(def);
    let out = match s.validate(v) {
        Ok(()) => Vec::new(),
        Err(errs) => errs.map(|e| format!("{} at {}", e, e.instance_path)).collect(),
    };
    out
}

#[track_caller]
pub fn assert_valid(def: &str, v: &Value) {
    let errs = schema_errors(def, v);
    assert!(errs.is_empty(), "{def} violations: {errs:#?}\n{v:#}");
}

// ---- golden files ----

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

/// Replaces run-specific values (ids, timestamps, latencies) with stable placeholders.
#[derive(Default)]
pub struct Normalizer {
    ids: BTreeMap<String, String>,
}

fn uuid_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}").unwrap())
}

fn time_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}(\.\d+)?(Z|[+-]\d{2}:\d{2})").unwrap())
}

fn port_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"127\.0\.0\.1:\d+").unwrap())
}

impl Normalizer {
    pub fn text(&mut self, s: &str) -> String {
        let mut out = String::with_capacity(s.len());
        let mut last = 0;
        for m in uuid_re().find_iter(s) {
            out.push_str(&s[last..m.start()]);
            let n = self.ids.len() + 1;
            let label = self.ids.entry(m.as_str().to_string()).or_insert_with(|| format!("<id-{n}>"));
            out.push_str(label);
            last = m.end();
        }
        out.push_str(&s[last..]);
        let out = time_re().replace_all(&out, "<timestamp>");
        port_re().replace_all(&out, "127.0.0.1:<port>").into_owned()
    }

    pub fn value(&mut self, v: &Value) -> Value {
        match v {
            Value::String(s) => Value::String(self.text(s)),
            Value::Array(a) => Value::Array(a.iter().map(|x| self.value(x)).collect()),
            Value::Object(o) => Value::Object(
                o.iter()
                    .map(|(k, x)| {
                        let x = match k.as_str() {
                            "latency_ms" if x.is_number() => json!(0),
                            "latency_ms" if x.is_string() => json!("0"),
                            _ => self.value(x),
                        };
                        (k.clone(), x)
                    })
                    .collect(),
            ),
            other => other.clone(),
        }
    }
}

/// Inverse of [`Normalizer`] up to identity: placeholders become valid
/// values so golden bodies can be checked against the schemas.
pub fn denormalize(v: &Value) -> Value {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"<id-(\d+)>").unwrap());
    match v {
        Value::String(s) => {
            let s = re.replace_all(s, |c: &regex::Captures| format!("00000000-0000-4000-8000-{:0>12}", &c[1]));
            Value::String(s.replace("<timestamp>", "2026-01-01T00:00:00Z").replace("<port>", "1"))
        }
        Value::Array(a) => Value::Array(a.iter().map(denormalize).collect()),
        Value::Object(o) => Value::Object(o.iter().map(|(k, x)| (k.clone(), denormalize(x))).collect()),
        other => other.clone(),
    }
}

#[derive(Default)]
pub struct Golden {
    pub norm: Normalizer,
    pub mismatches: Vec<String>,
    pub written: Vec<String>,
}

impl Golden {
    fn update() -> bool {
        std::env::var("UPDATE_GOLDEN").is_ok_and(|v| v == "1")
    }

    /// Compares `doc` with `golden/<name>.json`, or writes it when
    /// UPDATE_GOLDEN=1.
    pub fn check(&mut self, name: &str, doc: &Value) {
        let path = golden_dir().join(format!("{name}.json"));
        let text = serde_json::to_string_pretty(doc).unwrap() + "\n";
        if Golden::update() {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, &text).unwrap();
            self.written.push(name.to_string());
            return;
        }
        match std::fs::read_to_string(&path) {
            Ok(expected) if expected == text => {}
            Ok(expected) => self.mismatches.push(format!("{name}:\n--- golden\n{expected}\n--- actual\n{text}")),
            Err(_) => self.mismatches.push(format!("{name}: golden file missing (run with UPDATE_GOLDEN=1)")),
        }
    }

    #[track_caller]
    pub fn finish(self) {
        assert!(self.mismatches.is_empty(), "golden mismatches:\n{}", self.mismatches.join("\n\n"));
    }
}

/// One request/response pair checked against schemas and a golden file.
pub struct Exchange<'a> {
    pub name: &'a str,
    pub route: &'a str,
    pub method: &'a str,
    pub path: String,
    pub request_schema: Option<&'a str>,
    pub body: Option<Value>,
    pub raw_body: Option<String>,
    pub headers: Vec<(&'a str, String)>,
    pub response_schema: Option<&'a str>,
}

impl<'a> Exchange<'a> {
    pub fn new(name: &'a str, route: &'a str, method: &'a str, path: impl Into<String>) -> Self {
        Exchange {
            name,
            route,
            method,
            path: path.into(),
            request_schema: None,
            body: None,
            raw_body: None,
            headers: Vec::new(),
            response_schema: None,
        }
    }

    pub fn body(mut self, schema: &'a str, body: Value) -> Self {
        self.request_schema = Some(schema);
        self.body = Some(body);
        self
    }

    pub fn raw(mut self, text: String) -> Self {
        self.raw_body = Some(text);
        self
    }

    pub fn header(mut self, name: &'a str, value: impl Into<String>) -> Self {
        self.headers.push((name, value.into()));
        self
    }

    pub fn returns(mut self, schema: &'a str) -> Self {
        self.response_schema = Some(schema);
        self
    }

    #[track_caller]
    pub fn run(self, server: &Server, golden: &mut Golden) -> Reply {
        if let (Some(s), Some(b)) = (self.request_schema, &self.body) {
            assert_valid(s, b);
        }
        let reply = match &self.raw_body {
            Some(t) => server.send_text(self.method, &self.path, t),
            None => server.send_with(self.method, &self.path, self.body.as_ref(), &self.headers),
        };
        let response_schema = if reply.status >= 400 { Some("ApiError") } else { self.response_schema };
        let body_doc = if reply.text.is_empty() {
            Value::Null
        } else if reply.is_json() {
            let v = reply.json();
            if let Some(s) = response_schema {
                let errs = schema_errors(s, &v);
                assert!(errs.is_empty(), "{}: response violates {s}: {errs:#?}\n{v:#}", self.name);
            }
            v
        } else {
            Value::String(reply.text.clone())
        };
        let mut request = json!({"method": self.method, "path": self.path});
        if let Some(s) = self.request_schema {
            request["schema"] = json!(s);
        }
        if let Some(b) = &self.body {
            request["body"] = b.clone();
        }
        if let Some(t) = &self.raw_body {
            request["body"] = json!(t);
        }
        if !self.headers.is_empty() {
            request["headers"] = self.headers.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
        }
        let mut response = json!({"status": reply.status, "body": body_doc});
        if let Some(s) = response_schema {
            response["schema"] = json!(s);
        }
        if let Some(ct) = reply.header("content-type") {
            response["content_type"] = json!(ct);
        }
        if let Some(loc) = reply.header("location") {
            response["location"] = json!(loc);
        }
        let doc = json!({"route": self.route, "request": request, "response": response});
        let doc = golden.norm.value(&doc);
        golden.check(self.name, &doc);
        reply
    }
}

// ---- fake upstream chat endpoint ----

#[derive(Clone, Debug)]
pub enum Upstream {
    /// Valid completion with this content.
    Reply(String),
    /// Headers promise a body, the connection closes halfway through it.
    DropMidResponse,
    /// 401 whose body echoes the Authorization header.
    RejectEchoingAuth,
    /// 200 with a non-JSON body.
    Garbage,
}

pub struct FakeUpstream {
    pub base_url: String,
    pub hits: Arc<AtomicUsize>,
}

fn read_request(stream: &mut TcpStream) -> Option<(Vec<String>, Vec<u8>)> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut headers = Vec::new();
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim_end().to_string();
        if line.is_empty() {
            break;
        }
        headers.push(line);
    }
    let len = headers
        .iter()
        .find_map(|h| {
            let (k, v) = h.split_once(':')?;
            k.eq_ignore_ascii_case("content-length").then(|| v.trim().parse::<usize>().ok())?
        })
        .unwrap_or(0);
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some((headers, body))
}

fn respond(stream: &mut TcpStream, mode: &Upstream, headers: &[String]) {
    let send = |stream: &mut TcpStream, status: &str, body: &str| {
        let msg = format!(
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
        let _ = stream.write_all(msg.as_bytes());
    };
    match mode {
        Upstream::Reply(content) => {
            let body = json!({"id": "fake-1", "choices": [{"message": {"role": "assistant", "content": content}}]});
            send(stream, "200 OK", &body.to_string());
        }
        Upstream::DropMidResponse => {
            let head = "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: 400\r\n\r\n";
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(br#"{"id": "fake-1", "choices": [{"message": {"#);
            let _ = stream.flush();
            let _ = stream.shutdown(std::net::Shutdown::Both);
        }
        Upstream::RejectEchoingAuth => {
            let auth = headers
                .iter()
                .find(|h| h.to_ascii_lowercase().starts_with("authorization:"))
                .cloned()
                .unwrap_or_default();
            send(stream, "401 Unauthorized", &json!({"error": format!("invalid credentials: {auth}")}).to_string());
        }
        Upstream::Garbage => send(stream, "200 OK", "this is not json"),
    }
}

pub fn fake_upstream(mode: Upstream) -> FakeUpstream {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr: SocketAddr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let h = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mode = mode.clone();
            let h = h.clone();
            std::thread::spawn(move || {
                if let Some((headers, _)) = read_request(&mut stream) {
                    h.fetch_add(1, Ordering::SeqCst);
                    respond(&mut stream, &mode, &headers);
                }
            });
        }
    });
    FakeUpstream { base_url: format!("http://{addr}/v1"), hits }
}

/// Canonical dump of every record in the store, tombstones included.
pub fn store_dump(state: &AppState) -> Vec<String> {
    use vista_core::store::{canonical_record, Collection};
    let store = state.wb.store();
    Collection::ALL
        .iter()
        .flat_map(|c| store.scan(*c).unwrap())
        .map(|r| canonical_record(&r))
        .collect()
}
