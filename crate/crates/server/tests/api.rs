use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use opsdesk_core::config::Config;
use opsdesk_core::llm::replay::{Script, ScriptRule, ScriptedProvider};
use opsdesk_core::runtime::Runtime;
use opsdesk_server::{router, AppState};
use serde_json::{json, Value};
use tower::ServiceExt;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn read(name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(fixtures().join(name)).unwrap()).unwrap()
}

fn rules(v: &Value) -> Vec<ScriptRule> {
    serde_json::from_value(v["rules"].clone()).unwrap()
}

struct App {
    router: Router,
    state: AppState,
    _dir: tempfile::TempDir,
}

fn app_with(extra: Vec<ScriptRule>, token: Option<&str>) -> App {
    let dir = tempfile::tempdir().unwrap();
    let mut config = Config::default();
    config.paths.data_dir = dir.path().to_path_buf();
    let mut script = extra;
    script.extend(rules(&read("service/script.json")));
    let provider = ScriptedProvider::new("service", Script::new(script)).unwrap();
    let rt = Runtime::from_world(&fixtures().join("world"), Arc::new(provider), config).unwrap();
    let state = AppState::new(rt).with_token(token.map(str::to_string));
    App { router: router(state.clone()), state, _dir: dir }
}

fn app() -> App {
    app_with(Vec::new(), None)
}

struct Resp {
    status: StatusCode,
    replayed: bool,
    bytes: Bytes,
}

impl Resp {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.bytes)))
    }
}

impl App {
    async fn send(&self, method: Method, uri: &str, body: Option<&str>, headers: &[(&str, &str)]) -> Resp {
        let mut req = Request::builder().method(method).uri(uri);
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        let req = req.body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty)).unwrap();
        let res = self.router.clone().oneshot(req).await.unwrap();
        let status = res.status();
        let replayed = res.headers().contains_key("idempotent-replayed");
        let bytes = res.into_body().collect().await.unwrap().to_bytes();
        Resp { status, replayed, bytes }
    }

    async fn get(&self, uri: &str) -> Resp {
        self.send(Method::GET, uri, None, &[]).await
    }

    async fn post(&self, uri: &str, body: Value) -> Resp {
        self.send(Method::POST, uri, Some(&body.to_string()), &[]).await
    }

    async fn put(&self, uri: &str, body: Value) -> Resp {
        self.send(Method::PUT, uri, Some(&body.to_string()), &[]).await
    }

    async fn session(&self) -> String {
        let r = self.post("/v1/sessions", json!({})).await;
        assert_eq!(r.status, StatusCode::CREATED);
        r.json()["session_id"].as_str().unwrap().to_string()
    }

    async fn say(&self, session: &str, text: &str) -> Value {
        let r = self.post(&format!("/v1/sessions/{session}/messages"), json!({ "text": text })).await;
        assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.bytes));
        r.json()
    }

    async fn wait_ticket(&self, id: &str) -> Value {
        for _ in 0..200 {
            let t = self.get(&format!("/v1/tickets/{id}")).await.json();
            if t["status"] != "pending" {
                return t;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("ticket {id} stayed pending");
    }
}

fn console_context() -> Value {
    json!({ "task_id": 12345, "error_log": read("service/script.json")["pasted_log"], "keywords": ["hive sql"] })
}

#[tokio::test]
async fn health_needs_no_token_but_everything_else_does() {
    let app = app_with(Vec::new(), Some("s3cret"));
    assert_eq!(app.get("/v1/health").await.status, StatusCode::OK);
    let r = app.post("/v1/sessions", json!({})).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    assert_eq!(r.json()["code"], "unauthorized");
    let r = app.send(Method::POST, "/v1/sessions", Some("{}"), &[("authorization", "Bearer wrong")]).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    let r = app.send(Method::POST, "/v1/sessions", Some("{}"), &[("authorization", "Bearer s3cret")]).await;
    assert_eq!(r.status, StatusCode::CREATED);
}

#[tokio::test]
async fn small_talk_is_refused() {
    let app = app();
    let s = app.session().await;
    let r = app.say(&s, "hello, how are you").await;
    assert_eq!(r["reply"]["kind"], "refusal");
}

#[tokio::test]
async fn follow_up_then_answer_with_a_trace() {
    let app = app();
    let script = read("service/script.json");
    let s = app.session().await;

    let first = app.say(&s, script["missing_log_message"].as_str().unwrap()).await;
    assert_eq!(first["reply"]["kind"], "follow_up", "{first}");
    assert_eq!(first["reply"]["field"], "symptom");
    let view = app.get(&format!("/v1/sessions/{s}")).await.json();
    assert_eq!(view["awaiting_follow_up"], true);

    let second = app.say(&s, script["pasted_log"].as_str().unwrap()).await;
    assert_eq!(second["reply"]["kind"], "answer", "{second}");
    assert_eq!(second["reply"]["answer"]["citations"], json!(["sop-0007"]));

    let trace_ref = second["trace_ref"].as_str().unwrap();
    let a = app.get(trace_ref).await;
    let b = app.get(trace_ref).await;
    assert_eq!(a.status, StatusCode::OK);
    assert_eq!(a.bytes, b.bytes, "stored trace must not change between reads");
    let trace = a.json();
    let rows = trace["deepsearch"]["iterations"].as_array().unwrap();
    let retrieval = rows.iter().find(|r| r.get("level").is_some()).expect("a retrieval row");
    let candidates: Vec<&str> = retrieval["candidates"].as_array().unwrap().iter().map(|c| c["id"].as_str().unwrap()).collect();
    let kept: Vec<&str> = retrieval["kept"].as_array().unwrap().iter().map(|k| k.as_str().unwrap()).collect();
    assert!(candidates.len() > kept.len(), "filter should drop candidates: {candidates:?} vs {kept:?}");
    assert_eq!(kept, ["sop-0007"]);
    assert!(kept.iter().all(|k| candidates.contains(k)));

    let view = app.get(&format!("/v1/sessions/{s}")).await.json();
    let turns = view["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 4);
    assert_eq!(turns[3]["request_id"], second["request_id"]);
    assert_eq!(view["awaiting_follow_up"], false);
}

#[tokio::test]
async fn message_replay_with_the_same_key_runs_once() {
    let app = app();
    let s = app.session().await;
    let uri = format!("/v1/sessions/{s}/messages");
    let body = json!({ "text": "hello, how are you" }).to_string();
    let h = [("idempotency-key", "m-1")];
    let a = app.send(Method::POST, &uri, Some(&body), &h).await;
    let b = app.send(Method::POST, &uri, Some(&body), &h).await;
    assert_eq!(a.bytes, b.bytes);
    assert!(!a.replayed && b.replayed);
    let view = app.get(&format!("/v1/sessions/{s}")).await.json();
    assert_eq!(view["turns"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn escalation_files_one_ticket_per_conversation_state() {
    let app = app();
    let s = app.session().await;
    let uri = format!("/v1/sessions/{s}/escalate");

    let empty = app.post(&uri, json!({})).await;
    assert_eq!(empty.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(empty.json()["code"], "validation_failed");

    app.say(&s, "task 12345 keeps failing").await;
    let a = app.post(&uri, json!({})).await;
    let b = app.post(&uri, json!({})).await;
    assert_eq!(a.status, StatusCode::CREATED);
    assert_eq!(a.bytes, b.bytes);
    assert!(b.replayed);
    let id = a.json()["ticket_id"].as_str().unwrap().to_string();

    let keyed = app.send(Method::POST, &uri, Some("{}"), &[("idempotency-key", "esc-k")]).await;
    let again = app.send(Method::POST, &uri, Some("{}"), &[("idempotency-key", "esc-k")]).await;
    assert_eq!(keyed.bytes, again.bytes);
    assert_ne!(keyed.json()["ticket_id"], id.as_str());

    let ticket = app.wait_ticket(&id).await;
    assert_eq!(ticket["status"], "categorized", "{ticket}");
    let turns = ticket["ticket"]["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 2);
    assert_eq!(turns[0]["speaker"], "user");
    assert_eq!(turns[1]["speaker"], "assistant");
    assert_eq!(app.state.ticket(&id).unwrap().labels.unwrap().final_actions, ["schema_change"]);
}

#[tokio::test]
async fn console_diagnosis_checks_the_context() {
    let app = app();
    let r = app.post("/v1/diagnose", json!({ "context": { "task_id": "12345" } })).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let body = r.json();
    assert_eq!(body["code"], "schema_validation");
    assert_eq!(body["detail"]["missing"], json!(["error_log"]));

    let r = app.post("/v1/diagnose", json!({ "context": console_context() })).await;
    assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.bytes));
    let body = r.json();
    assert_eq!(body["answer"]["citations"], json!(["sop-0007"]));
    let trace = app.get(body["trace_ref"].as_str().unwrap()).await.json();
    assert_eq!(trace["channel"], "console");
}

#[tokio::test]
async fn disabling_the_sop_level_changes_the_search() {
    let app = app();
    let before = app.post("/v1/diagnose", json!({ "context": console_context() })).await.json();
    let r = app.put("/v1/kb/levels/sop", json!({ "enabled": false })).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["enabled"], false);
    let after = app.post("/v1/diagnose", json!({ "context": console_context() })).await.json();
    let (b, a) = (retrieval_rounds(&app, &before).await, retrieval_rounds(&app, &after).await);
    assert!(a > b, "retrieval iterations {b} -> {a}");
    assert!(!after["answer"]["citations"].as_array().unwrap().iter().any(|c| c == "sop-0007"));

    let r = app.put("/v1/kb/levels/general", json!({ "enabled": false })).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
}

async fn retrieval_rounds(app: &App, diagnosis: &Value) -> usize {
    let t = app.get(diagnosis["trace_ref"].as_str().unwrap()).await.json();
    t["deepsearch"]["iterations"].as_array().unwrap().iter().filter(|r| r.get("level").is_some()).count()
}

#[tokio::test]
async fn ticket_ingest_is_categorized_in_the_background() {
    let app = app();
    let ticket = json!({
        "id": "TK-1",
        "turns": [{ "speaker": "user", "text": "insert fails with NumberFormatException" },
                  { "speaker": "on_call_engineer", "text": "column type changed, fixed the schema" }],
        "outcome": "schema fixed"
    });
    let r = app.post("/v1/tickets", ticket.clone()).await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    assert_eq!(r.json()["status"], "pending");
    let done = app.wait_ticket("TK-1").await;
    assert_eq!(done["status"], "categorized");
    assert_eq!(done["labels"]["final_actions"], json!(["schema_change"]));

    let same = app.post("/v1/tickets", ticket.clone()).await;
    assert_eq!(same.status, StatusCode::ACCEPTED);
    assert_eq!(same.json()["status"], "categorized");
    let mut changed = ticket;
    changed["outcome"] = json!("something else");
    assert_eq!(app.post("/v1/tickets", changed).await.status, StatusCode::CONFLICT);
    let blank = app.post("/v1/tickets", json!({ "id": "TK-2", "turns": [] })).await;
    assert_eq!(blank.status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn extraction_returns_the_delta_report() {
    let case = read("sop/case_study.json");
    let app = app_with(rules(&case), None);
    let (seed_id, seed) = case["seed"].as_object().unwrap().iter().next().unwrap();
    let r = app
        .put(
            "/v1/kb/entries",
            json!({ "id": seed_id, "level": "sop", "base_id": "sop", "key": seed["problem_desc"], "value": seed.to_string() }),
        )
        .await;
    assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.bytes));
    assert_eq!(r.json()["created"], false);

    let id = case["ticket"]["id"].as_str().unwrap();
    assert_eq!(app.post("/v1/tickets", case["ticket"].clone()).await.status, StatusCode::ACCEPTED);
    app.wait_ticket(id).await;
    let r = app.post(&format!("/v1/tickets/{id}/extract"), json!({})).await;
    assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.bytes));
    let report = r.json();
    assert_eq!(report["ticket_id"], id);
    assert_eq!(report["drafts"].as_array().unwrap().len(), 3);
    assert!(report["mutation"].to_string().contains(seed_id), "{}", report["mutation"]);

    assert_eq!(app.post("/v1/tickets/TK-none/extract", json!({})).await.json()["code"], "unknown_ticket");
}

#[tokio::test]
async fn knowledge_entries_can_be_listed_read_and_written() {
    let app = app();
    let all = app.get("/v1/kb").await.json();
    let n = all["entries"].as_array().unwrap().len();
    let sops = app.get("/v1/kb?level=sop").await.json();
    assert_eq!(sops["entries"].as_array().unwrap().len(), 20);
    assert!(n > 20);
    assert_eq!(app.get("/v1/kb?level=banana").await.status, StatusCode::UNPROCESSABLE_ENTITY);

    let e = app.get("/v1/kb/entries/sop-0007").await.json();
    assert_eq!(e["level"], "sop");

    let new = json!({ "id": "doc-new", "level": "internal", "base_id": "hive", "key": "Hive view rebuild", "value": "Rebuild views after a schema change." });
    let r = app.put("/v1/kb/entries", new).await;
    assert_eq!(r.status, StatusCode::CREATED);
    assert_eq!(app.get("/v1/kb/entries/doc-new").await.json()["key"], "Hive view rebuild");
    assert_eq!(app.get("/v1/kb?base=hive").await.json()["entries"].as_array().unwrap().iter().filter(|e| e["id"] == "doc-new").count(), 1);

    let bad_sop = json!({ "id": "sop-bad", "level": "sop", "base_id": "sop", "key": "k", "value": "not a record" });
    assert_eq!(app.put("/v1/kb/entries", bad_sop).await.status, StatusCode::UNPROCESSABLE_ENTITY);
    let nowhere = json!({ "id": "x", "level": "internal", "base_id": "nope", "key": "k", "value": "v" });
    assert_eq!(app.put("/v1/kb/entries", nowhere).await.status, StatusCode::UNPROCESSABLE_ENTITY);
    let web = json!({ "id": "x", "level": "web", "base_id": "web", "key": "k", "value": "v" });
    assert_eq!(app.put("/v1/kb/entries", web).await.status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn errors_carry_a_typed_body() {
    let app = app();
    let cases = [
        (app.get("/v1/sessions/nope").await, StatusCode::NOT_FOUND, "unknown_session"),
        (app.get("/v1/tickets/nope").await, StatusCode::NOT_FOUND, "unknown_ticket"),
        (app.get("/v1/traces/nope").await, StatusCode::NOT_FOUND, "unknown_trace"),
        (app.get("/v1/kb/entries/nope").await, StatusCode::NOT_FOUND, "unknown_entry"),
        (app.get("/v2/anything").await, StatusCode::NOT_FOUND, "not_found"),
        (app.post("/v1/sessions/nope/messages", json!({ "text": "hi" })).await, StatusCode::NOT_FOUND, "unknown_session"),
        (app.send(Method::POST, "/v1/diagnose", Some("{not json"), &[]).await, StatusCode::UNPROCESSABLE_ENTITY, "validation_failed"),
        (app.send(Method::DELETE, "/v1/sessions", None, &[]).await, StatusCode::METHOD_NOT_ALLOWED, "not_found"),
    ];
    for (r, status, code) in cases {
        assert_eq!(r.status, status, "{}", String::from_utf8_lossy(&r.bytes));
        let body = r.json();
        assert_eq!(body["code"], code);
        assert!(body["message"].is_string());
    }
    let s = app.session().await;
    let r = app.post(&format!("/v1/sessions/{s}/messages"), json!({ "text": "   " })).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
}
