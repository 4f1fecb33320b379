//! Every route driven once through HTTP with schema validation on both
//! sides and golden-file comparison of the normalized exchange.

mod common;

use std::collections::BTreeSet;

use common::{assert_valid, item_001, Exchange, Golden, Server, BENCH, ROUTES, SCHEMA_TEXT};
use serde_json::{json, Value};

fn script() -> Value {
    let replies = ["QUERY 0", "QUERY 2", "S1: sum is odd [uses: V0]\nQUERY 1", "QUERY 3", "QUERY 0"];
    let rules: Vec<Value> = replies
        .iter()
        .enumerate()
        .map(|(i, r)| json!({"matcher": "nth_call", "matcher_arg": (i + 1).to_string(), "response_text": r}))
        .collect();
    json!({"id": "scripted-a", "rules": rules, "default_response": "QUERY 0"})
}

#[test]
fn every_route_matches_schema_and_golden() {
    let s = Server::start();
    let mut g = Golden::default();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut ex = |e: Exchange, g: &mut Golden| {
        seen.insert(format!("{} {}", e.method, e.route));
        e.run(&s, g)
    };

    ex(Exchange::new("health", "/health", "GET", "/health").returns("Health"), &mut g).expect(200);

    // providers
    let provider = json!({"id": "scripted-a", "kind": "scripted", "script": script()});
    let r = ex(
        Exchange::new("providers_create", "/providers", "POST", "/providers")
            .body("ProviderSpecBody", provider.clone())
            .returns("VersionedProviderSpec"),
        &mut g,
    )
    .expect(201);
    assert_eq!(r.header("location"), Some("/providers/scripted-a"));
    ex(Exchange::new("providers_list", "/providers", "GET", "/providers").returns("ProviderList"), &mut g).expect(200);
    ex(
        Exchange::new("providers_get", "/providers/{id}", "GET", "/providers/scripted-a").returns("VersionedProviderSpec"),
        &mut g,
    )
    .expect(200);
    let r = ex(
        Exchange::new("providers_put", "/providers/{id}", "PUT", "/providers/scripted-a")
            .body("ProviderSpecBody", provider)
            .returns("VersionedProviderSpec"),
        &mut g,
    )
    .expect(200);
    assert_eq!(r.json()["version"], 2);
    let r = ex(
        Exchange::new("providers_probe", "/providers/{id}/probe", "POST", "/providers/scripted-a/probe")
            .returns("HealthReport"),
        &mut g,
    )
    .expect(200);
    assert_eq!(r.json()["ok"], true);

    // models
    let model = json!({"id": "model-a", "provider_id": "scripted-a", "model_name": "scripted"});
    ex(
        Exchange::new("models_create", "/models", "POST", "/models")
            .body("ModelConfigBody", model)
            .returns("VersionedModelConfig"),
        &mut g,
    )
    .expect(201);
    ex(Exchange::new("models_list", "/models", "GET", "/models").returns("ModelConfigList"), &mut g).expect(200);
    ex(Exchange::new("models_get", "/models/{id}", "GET", "/models/model-a").returns("VersionedModelConfig"), &mut g)
        .expect(200);
    ex(
        Exchange::new("models_put", "/models/{id}", "PUT", "/models/model-a")
            .body(
                "ModelConfigBody",
                json!({"id": "model-a", "provider_id": "scripted-a", "model_name": "scripted", "temperature": 0.5}),
            )
            .returns("VersionedModelConfig"),
        &mut g,
    )
    .expect(200);

    // benchmarks
    ex(Exchange::new("benchmarks_list", "/benchmarks", "GET", "/benchmarks").returns("BenchmarkList"), &mut g)
        .expect(200);
    let bench = json!({"id": "deduction-easy", "plugin_id": BENCH, "description": "short games"});
    ex(
        Exchange::new("benchmarks_create", "/benchmarks", "POST", "/benchmarks")
            .body("Benchmark", bench)
            .returns("Benchmark"),
        &mut g,
    )
    .expect(201);
    ex(
        Exchange::new("benchmarks_get", "/benchmarks/{id}", "GET", format!("/benchmarks/{BENCH}")).returns("Benchmark"),
        &mut g,
    )
    .expect(200);
    ex(
        Exchange::new("benchmarks_put", "/benchmarks/{id}", "PUT", "/benchmarks/deduction-easy")
            .body("Benchmark", json!({"id": "deduction-easy", "plugin_id": BENCH, "description": "renamed"}))
            .returns("Benchmark"),
        &mut g,
    )
    .expect(200);

    // items
    let items = format!("/benchmarks/{BENCH}/items");
    let r = ex(
        Exchange::new("items_create", "/benchmarks/{id}/items", "POST", items.clone())
            .body("Item", item_001())
            .returns("RedactedItem"),
        &mut g,
    )
    .expect(201);
    assert!(r.json().get("hidden_code").is_none());
    ex(Exchange::new("items_list", "/benchmarks/{id}/items", "GET", items.clone()).returns("ItemList"), &mut g)
        .expect(200);
    ex(
        Exchange::new("items_get", "/benchmarks/{id}/items/{item_id}", "GET", format!("{items}/item-001?reveal=true"))
            .returns("RedactedItem"),
        &mut g,
    )
    .expect(200);
    ex(
        Exchange::new("items_put", "/benchmarks/{id}/items/{item_id}", "PUT", format!("{items}/item-001"))
            .body("Item", item_001())
            .returns("RedactedItem"),
        &mut g,
    )
    .expect(200);
    ex(
        Exchange::new("items_generate", "/benchmarks/{id}/items/generate", "POST", format!("{items}/generate"))
            .body("GenerateItemRequest", json!({"item_id": "gen-7", "seed": 7, "params": {"verifier_count": 4}}))
            .returns("RedactedItem"),
        &mut g,
    )
    .expect(201);
    ex(
        Exchange::new("items_delete", "/benchmarks/{id}/items/{item_id}", "DELETE", format!("{items}/gen-7")),
        &mut g,
    )
    .expect(204);

    // sessions
    let r = ex(
        Exchange::new("sessions_create", "/sessions", "POST", "/sessions")
            .body(
                "CreateSessionRequest",
                json!({"benchmark_id": BENCH, "item_id": "item-001", "model_config_id": "model-a"}),
            )
            .returns("SessionView"),
        &mut g,
    )
    .expect(201);
    let sid = r.json()["id"].as_str().unwrap().to_string();
    assert_eq!(r.header("location"), Some(format!("/sessions/{sid}").as_str()));
    let r = ex(
        Exchange::new("sessions_step", "/sessions/{id}/step", "POST", format!("/sessions/{sid}/step")).returns("StepResult"),
        &mut g,
    )
    .expect(200);
    assert_eq!(r.json()["new_messages"].as_array().unwrap().len(), 2);
    let r = ex(
        Exchange::new("sessions_step_batch", "/sessions/{id}/step", "POST", format!("/sessions/{sid}/step?steps=4"))
            .returns("StepResult"),
        &mut g,
    )
    .expect(200);
    assert_eq!(r.json()["steps_executed"], 4);
    ex(Exchange::new("sessions_list", "/sessions", "GET", "/sessions").returns("SessionHeaderList"), &mut g).expect(200);
    let r = ex(
        Exchange::new("sessions_get", "/sessions/{id}", "GET", format!("/sessions/{sid}")).returns("SessionView"),
        &mut g,
    )
    .expect(200);
    assert_eq!(r.json()["messages"].as_array().unwrap().len(), 12);

    let r = ex(
        Exchange::new("sessions_fork", "/sessions/{id}/messages/{idx}/edit", "POST", format!("/sessions/{sid}/messages/3/edit"))
            .body("EditRequest", json!({"mode": "fork", "content": "VERIFIER 0: TRUE"}))
            .returns("SessionView"),
        &mut g,
    )
    .expect(201);
    let child = r.json()["id"].as_str().unwrap().to_string();
    assert_eq!(r.header("location"), Some(format!("/sessions/{child}").as_str()));
    ex(
        Exchange::new("sessions_step_child", "/sessions/{id}/step", "POST", format!("/sessions/{child}/step"))
            .returns("StepResult"),
        &mut g,
    )
    .expect(200);
    let r = ex(
        Exchange::new("sessions_diff", "/sessions/{id}/diff/{other}", "GET", format!("/sessions/{sid}/diff/{child}"))
            .returns("SessionDiff"),
        &mut g,
    )
    .expect(200);
    assert_eq!(r.json()["common_prefix_len"], 3);
    assert_eq!(r.json()["fork_relation"], "parent_child");
    ex(
        Exchange::new("sessions_append", "/sessions/{id}/messages", "POST", format!("/sessions/{child}/messages"))
            .body("AppendMessageRequest", json!({"role": "user", "content": "Think about verifier 2."}))
            .returns("Message"),
        &mut g,
    )
    .expect(201);
    let r = ex(
        Exchange::new(
            "sessions_edit_in_place",
            "/sessions/{id}/messages/{idx}/edit",
            "POST",
            format!("/sessions/{child}/messages/4/edit"),
        )
        .body("EditRequest", json!({"mode": "in_place", "content": "QUERY 2"}))
        .returns("SessionView"),
        &mut g,
    )
    .expect(200);
    assert_eq!(r.json()["messages"].as_array().unwrap().len(), 5);

    // trees
    let r = ex(
        Exchange::new("tree_generate", "/sessions/{id}/tree", "POST", format!("/sessions/{sid}/tree?generator=deterministic"))
            .returns("ReasoningTree"),
        &mut g,
    )
    .expect(200);
    assert!(!r.json()["nodes"].as_array().unwrap().is_empty());
    ex(
        Exchange::new("tree_get", "/sessions/{id}/tree", "GET", format!("/sessions/{sid}/tree")).returns("ReasoningTree"),
        &mut g,
    )
    .expect(200);
    let r = ex(Exchange::new("tree_get_dot", "/sessions/{id}/tree", "GET", format!("/sessions/{sid}/tree?format=dot")), &mut g)
        .expect(200);
    assert!(r.text.starts_with("digraph reasoning {"));

    // audit, export, import
    let r = ex(
        Exchange::new("sessions_audit", "/sessions/{id}/audit", "GET", format!("/sessions/{child}/audit"))
            .returns("AuditEventList"),
        &mut g,
    )
    .expect(200);
    let audit = r.json();
    let kinds: Vec<&str> = audit["items"].as_array().unwrap().iter().map(|e| e["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["fork_created", "step_executed", "step_executed", "in_place_edit"]);
    let r = ex(Exchange::new("sessions_export", "/sessions/{id}/export", "GET", format!("/sessions/{child}/export")), &mut g)
        .expect(200);
    let mut lines: Vec<String> = r.text.lines().map(String::from).collect();
    let mut header: Value = serde_json::from_str(&lines[0]).unwrap();
    assert_valid("SessionHeader", &header);
    for l in &lines[1..] {
        assert_valid("Message", &serde_json::from_str(l).unwrap());
    }
    header["id"] = json!("imported-copy");
    lines[0] = header.to_string();
    let r = ex(
        Exchange::new("sessions_import", "/sessions/import", "POST", "/sessions/import")
            .raw(lines.join("\n") + "\n")
            .returns("SessionView"),
        &mut g,
    )
    .expect(201);
    assert_eq!(r.header("location"), Some("/sessions/imported-copy"));

    // end of a session
    ex(
        Exchange::new("sessions_abort", "/sessions/{id}/abort", "POST", format!("/sessions/{sid}/abort")).returns("SessionView"),
        &mut g,
    )
    .expect(200);
    let r = ex(
        Exchange::new("sessions_score", "/sessions/{id}/score", "GET", format!("/sessions/{sid}/score")).returns("Score"),
        &mut g,
    )
    .expect(200);
    assert_eq!(r.json()["solved"], false);
    assert_eq!(r.json()["rounds_used"], 5);

    // deletes
    ex(Exchange::new("benchmarks_delete", "/benchmarks/{id}", "DELETE", "/benchmarks/deduction-easy"), &mut g).expect(204);
    s.post("/providers", json!({"id": "spare", "kind": "scripted", "script": {"id": "spare", "default_response": "x"}}))
        .expect(201);
    s.post("/models", json!({"id": "spare", "provider_id": "spare", "model_name": "x"})).expect(201);
    ex(Exchange::new("models_delete", "/models/{id}", "DELETE", "/models/spare"), &mut g).expect(204);
    ex(Exchange::new("providers_delete", "/providers/{id}", "DELETE", "/providers/spare"), &mut g).expect(204);

    let expected: BTreeSet<String> = ROUTES.iter().map(|r| r.to_string()).collect();
    let missing: Vec<_> = expected.difference(&seen).collect();
    let extra: Vec<_> = seen.difference(&expected).collect();
    assert!(missing.is_empty() && extra.is_empty(), "missing {missing:?}, unlisted {extra:?}");
    g.finish();
}

#[test]
fn schema_document_compiles_and_lists_every_error_code() {
    let doc: Value = serde_json::from_str(SCHEMA_TEXT).unwrap();
    for name in doc["$defs"].as_object().unwrap().keys() {
        common::validator(name);
    }
    let in_schema: BTreeSet<&str> =
        doc["$defs"]["ApiError"]["properties"]["code"]["enum"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    let in_table: BTreeSet<&str> = vista_server::ERROR_TABLE.iter().map(|(c, _)| *c).collect();
    assert_eq!(in_schema, in_table);
}

#[test]
fn golden_files_validate_against_their_schemas() {
    let dir = common::golden_dir();
    let mut checked = 0;
    for entry in walk(&dir) {
        let doc: Value = serde_json::from_str(&std::fs::read_to_string(&entry).unwrap()).unwrap();
        for side in ["request", "response"] {
            if let (Some(schema), Some(body)) = (doc[side]["schema"].as_str(), doc[side].get("body")) {
                if body.is_null() || body.is_string() {
                    continue;
                }
                let errs = common::schema_errors(schema, &common::denormalize(body));
                assert!(errs.is_empty(), "{}: {side} violates {schema}: {errs:#?}", entry.display());
                checked += 1;
            }
        }
    }
    assert!(checked >= ROUTES.len(), "only {checked} golden bodies checked");
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else if p.extension().is_some_and(|x| x == "json") {
            out.push(p);
        }
    }
    out.sort();
    out
}
