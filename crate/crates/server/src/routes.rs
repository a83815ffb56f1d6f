use std::collections::BTreeMap;
use std::future::Future;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::Router;
use chrono::Utc;
use opsdesk_core::deepsearch::FinalAnswer;
use opsdesk_core::kb::{KnowledgeEntry, Level};
use opsdesk_core::llm::RequestContext;
use opsdesk_core::pipeline::{Channel, PipelineError, Reply, Role, Session, SessionTurn};
use opsdesk_core::sop_extract::{ExtractError, SopExtractor};
use opsdesk_core::tickets::{self, Speaker, Ticket, TicketError, Turn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::ApiError;
use crate::state::{AppState, SessionSlot, TicketRecord, TicketStatus};

const IDEMPOTENCY_KEY: &str = "idempotency-key";
const REPLAYED: &str = "idempotent-replayed";

pub fn router(state: AppState) -> Router {
    let protected = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/escalate", post(escalate))
        .route("/diagnose", post(diagnose))
        .route("/tickets", post(ingest_ticket))
        .route("/tickets/{id}", get(get_ticket))
        .route("/tickets/{id}/extract", post(extract))
        .route("/kb", get(list_kb))
        .route("/kb/entries", put(upsert_entry))
        .route("/kb/entries/{id}", get(get_entry))
        .route("/kb/levels/{level}", put(set_level))
        .route("/traces/{request_id}", get(get_trace))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    let v1 = Router::new().route("/health", get(health)).merge(protected);
    Router::new()
        .nest("/v1", v1)
        .fallback(not_found)
        .method_not_allowed_fallback(not_allowed)
        .with_state(state)
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.inner.token {
        let given = req.headers().get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return ApiError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

async fn not_found(req: Request) -> Response {
    ApiError::NotFound(req.uri().path().to_string()).into_response()
}

async fn not_allowed(req: Request) -> Response {
    let mut r = ApiError::NotFound(format!("{} {}", req.method(), req.uri().path())).into_response();
    *r.status_mut() = StatusCode::METHOD_NOT_ALLOWED;
    r
}

type Handled = Result<(StatusCode, Bytes), ApiError>;

fn json_bytes<T: Serialize>(v: &T) -> Bytes {
    Bytes::from(serde_json::to_vec(v).expect("response serializes"))
}

fn ok<T: Serialize>(status: StatusCode, v: &T) -> Handled {
    Ok((status, json_bytes(v)))
}

fn respond(status: StatusCode, body: Bytes) -> Response {
    let mut r = (status, body).into_response();
    r.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    r
}

fn finish(result: Handled) -> Response {
    match result {
        Ok((s, b)) => respond(s, b),
        Err(e) => e.into_response(),
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::ValidationFailed(format!("invalid JSON body: {e}")))
}

/// Empty bodies are read as `{}`.
fn parse_or_default<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return parse(&Bytes::from_static(b"{}"));
    }
    parse(body)
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))?
}

fn header_key(headers: &HeaderMap) -> Option<String> {
    headers.get(IDEMPOTENCY_KEY).and_then(|v| v.to_str().ok()).map(str::trim).filter(|k| !k.is_empty()).map(str::to_string)
}

/// Runs `work` once per `(scope, key)`. Concurrent duplicates wait for the
/// first; later duplicates get the stored response. Failures are not
/// stored, so a failed request can be retried with the same key.
async fn idempotent<F, Fut>(state: &AppState, scope: &str, key: Option<String>, work: F) -> Response
where
    F: FnOnce() -> Fut,
    Fut: Future<Output = Handled>,
{
    let Some(key) = key else {
        return finish(work().await);
    };
    let slot = state.inner.idempotency.lock().expect("idempotency lock").entry(format!("{scope}\n{key}")).or_default().clone();
    let mut stored = slot.lock().await;
    if let Some((status, body)) = stored.as_ref() {
        let mut r = respond(*status, body.clone());
        r.headers_mut().insert(REPLAYED, HeaderValue::from_static("true"));
        return r;
    }
    let result = work().await;
    if let Ok((status, body)) = &result {
        *stored = Some((*status, body.clone()));
    }
    finish(result)
}

async fn health() -> Response {
    finish(ok(StatusCode::OK, &serde_json::json!({ "status": "ok" })))
}

// ---- sessions

#[derive(Deserialize, Default)]
#[serde(default)]
struct CreateSession {
    channel: Option<Channel>,
}

#[derive(Serialize)]
struct SessionView<'a> {
    session_id: &'a str,
    channel: Channel,
    created_at: chrono::DateTime<Utc>,
    awaiting_follow_up: bool,
    turns: &'a [SessionTurn],
}

async fn create_session(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let st = state.clone();
    idempotent(&state, "sessions", header_key(&headers), || async move {
        let req: CreateSession = parse_or_default(&body)?;
        let channel = req.channel.unwrap_or(Channel::Chat);
        let id = st.next_id("ses");
        let created_at = Utc::now();
        let session = Session::new(id.clone(), channel);
        let view = SessionView { session_id: &id, channel, created_at, awaiting_follow_up: false, turns: &[] };
        let out = ok(StatusCode::CREATED, &view);
        st.inner.sessions.lock().expect("session lock").insert(
            id.clone(),
            SessionSlot { created_at, session: Arc::new(tokio::sync::Mutex::new(session)) },
        );
        out
    })
    .await
}

fn session_slot(state: &AppState, id: &str) -> Result<(Arc<tokio::sync::Mutex<Session>>, chrono::DateTime<Utc>), ApiError> {
    let sessions = state.inner.sessions.lock().expect("session lock");
    let slot = sessions.get(id).ok_or_else(|| ApiError::UnknownSession(id.to_string()))?;
    Ok((slot.session.clone(), slot.created_at))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    let result = async {
        let (session, created_at) = session_slot(&state, &id)?;
        let s = session.lock().await;
        ok(
            StatusCode::OK,
            &SessionView { session_id: &s.id, channel: s.channel, created_at, awaiting_follow_up: s.awaiting_follow_up(), turns: &s.turns },
        )
    }
    .await;
    finish(result)
}

#[derive(Deserialize)]
struct MessageRequest {
    text: String,
}

#[derive(Serialize)]
struct MessageResponse<'a> {
    request_id: &'a str,
    reply: &'a Reply,
    trace_ref: String,
}

fn trace_ref(request_id: &str) -> String {
    format!("/v1/traces/{request_id}")
}

fn pipeline_error(e: PipelineError) -> ApiError {
    match e {
        PipelineError::EmptyMessage => ApiError::ValidationFailed(e.to_string()),
        PipelineError::SchemaValidation { missing } => ApiError::SchemaValidation { missing },
    }
}

async fn post_message(State(state): State<AppState>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    let st = state.clone();
    idempotent(&state, &format!("message:{id}"), header_key(&headers), || async move {
        let req: MessageRequest = parse(&body)?;
        let (session, _) = session_slot(&st, &id)?;
        let mut guard = session.lock_owned().await;
        let request_id = st.next_id("req");
        blocking(move || {
            let out = st.inner.rt.pipeline.handle_message(&mut guard, &req.text).map_err(pipeline_error)?;
            if let Some(last) = guard.turns.last_mut() {
                last.request_id = Some(request_id.clone());
            }
            st.put_trace(&request_id, out.trace.payload());
            ok(StatusCode::OK, &MessageResponse { request_id: &request_id, reply: &out.reply, trace_ref: trace_ref(&request_id) })
        })
        .await
    })
    .await
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct EscalateRequest {
    outcome: String,
}

#[derive(Serialize)]
struct EscalateResponse<'a> {
    ticket_id: &'a str,
    status: TicketStatus,
}

/// Files the conversation as a ticket. Without an `Idempotency-Key` the
/// key is derived from the session and its length, so a double submit of
/// the same conversation yields one ticket.
async fn escalate(State(state): State<AppState>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    let (session, _) = match session_slot(&state, &id) {
        Ok(s) => s,
        Err(e) => return e.into_response(),
    };
    let turns = {
        let s = session.lock().await;
        s.turns.clone()
    };
    let key = header_key(&headers).unwrap_or_else(|| format!("auto:{}", turns.len()));
    let st = state.clone();
    idempotent(&state, &format!("escalate:{id}"), Some(key), || async move {
        let req: EscalateRequest = parse_or_default(&body)?;
        if turns.iter().all(|t| t.text.trim().is_empty()) {
            return Err(ApiError::ValidationFailed(format!("session {id} has no conversation to escalate")));
        }
        let ticket_id = st.next_id(&format!("esc-{id}"));
        let turns = turns
            .into_iter()
            .map(|t| Turn { speaker: if t.role == Role::User { Speaker::User } else { Speaker::Assistant }, text: t.text })
            .collect();
        let ticket = Ticket { id: ticket_id.clone(), turns, outcome: req.outcome, created_at: Utc::now() };
        let status = store_ticket(&st, ticket)?;
        ok(StatusCode::CREATED, &EscalateResponse { ticket_id: &ticket_id, status })
    })
    .await
}

// ---- console

#[derive(Deserialize)]
struct DiagnoseRequest {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    context: BTreeMap<String, Value>,
}

#[derive(Serialize)]
struct DiagnoseResponse<'a> {
    request_id: &'a str,
    answer: &'a FinalAnswer,
    trace_ref: String,
}

/// Scalars become strings; arrays of scalars are comma-joined.
fn context_strings(context: BTreeMap<String, Value>) -> Result<BTreeMap<String, String>, ApiError> {
    fn scalar(v: &Value) -> Option<String> {
        match v {
            Value::String(s) => Some(s.clone()),
            Value::Number(n) => Some(n.to_string()),
            Value::Bool(b) => Some(b.to_string()),
            _ => None,
        }
    }
    context
        .into_iter()
        .filter(|(_, v)| !v.is_null())
        .map(|(k, v)| {
            let s = match &v {
                Value::Array(items) => items.iter().map(scalar).collect::<Option<Vec<_>>>().map(|v| v.join(", ")),
                other => scalar(other),
            };
            s.map(|s| (k.clone(), s)).ok_or_else(|| ApiError::ValidationFailed(format!("context field `{k}` must be a scalar")))
        })
        .collect()
}

async fn diagnose(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let st = state.clone();
    idempotent(&state, "diagnose", header_key(&headers), || async move {
        let req: DiagnoseRequest = parse(&body)?;
        let context = context_strings(req.context)?;
        let request_id = st.next_id("req");
        blocking(move || {
            let out = st.inner.rt.pipeline.diagnose(req.text.as_deref(), &context).map_err(pipeline_error)?;
            let Reply::Answer { answer } = &out.reply else {
                return Err(ApiError::Internal("diagnosis produced no answer".into()));
            };
            st.put_trace(&request_id, out.trace.payload());
            ok(StatusCode::OK, &DiagnoseResponse { request_id: &request_id, answer, trace_ref: trace_ref(&request_id) })
        })
        .await
    })
    .await
}

async fn get_trace(State(state): State<AppState>, Path(request_id): Path<String>) -> Response {
    match state.trace(&request_id) {
        Some(payload) => respond(StatusCode::OK, Bytes::from(payload.as_bytes().to_vec())),
        None => ApiError::UnknownTrace(request_id).into_response(),
    }
}

// ---- tickets

/// Records a new ticket and starts categorization in the background.
/// Re-submitting the same conversation is a no-op; a different one under
/// an existing id is a conflict.
fn store_ticket(state: &AppState, ticket: Ticket) -> Result<TicketStatus, ApiError> {
    if ticket.id.trim().is_empty() {
        return Err(ApiError::ValidationFailed("ticket id is empty".into()));
    }
    if ticket.is_empty() {
        return Err(ApiError::ValidationFailed(format!("ticket {} has no content", ticket.id)));
    }
    {
        let mut map = state.inner.tickets.lock().expect("ticket lock");
        if let Some(existing) = map.get(&ticket.id) {
            if existing.ticket.turns == ticket.turns && existing.ticket.outcome == ticket.outcome {
                return Ok(existing.status);
            }
            return Err(ApiError::Conflict(format!("ticket {} already exists with different content", ticket.id)));
        }
        map.insert(ticket.id.clone(), TicketRecord { ticket: ticket.clone(), status: TicketStatus::Pending, labels: None, error: None });
    }
    let st = state.clone();
    tokio::spawn(async move {
        let id = ticket.id.clone();
        let worker = st.clone();
        let result = tokio::task::spawn_blocking(move || {
            let rt = &worker.inner.rt;
            let mut ctx = RequestContext::new(rt.config.budget.budget());
            tickets::categorize(&rt.gateway, &ticket, &rt.config.causes.vocabulary, &mut ctx)
        })
        .await;
        let mut map = st.inner.tickets.lock().expect("ticket lock");
        let Some(rec) = map.get_mut(&id) else { return };
        match result {
            Ok(Ok(c)) => {
                rec.status = TicketStatus::Categorized;
                rec.labels = Some(c.labels);
            }
            Ok(Err(e @ TicketError::NeedsManualLabeling { .. })) => {
                rec.status = TicketStatus::NeedsManualLabeling;
                rec.error = Some(e.to_string());
            }
            Ok(Err(e)) => {
                rec.status = TicketStatus::Failed;
                rec.error = Some(e.to_string());
            }
            Err(e) => {
                rec.status = TicketStatus::Failed;
                rec.error = Some(e.to_string());
            }
        }
    });
    Ok(TicketStatus::Pending)
}

#[derive(Deserialize)]
struct IngestRequest {
    id: String,
    turns: Vec<Turn>,
    #[serde(default)]
    outcome: String,
    #[serde(default)]
    created_at: Option<chrono::DateTime<Utc>>,
}

async fn ingest_ticket(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let st = state.clone();
    idempotent(&state, "tickets", header_key(&headers), || async move {
        let req: IngestRequest = parse(&body)?;
        let ticket = Ticket { id: req.id, turns: req.turns, outcome: req.outcome, created_at: req.created_at.unwrap_or_else(Utc::now) };
        let id = ticket.id.clone();
        let status = store_ticket(&st, ticket)?;
        ok(StatusCode::ACCEPTED, &EscalateResponse { ticket_id: &id, status })
    })
    .await
}

async fn get_ticket(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    finish(state.ticket(&id).ok_or(ApiError::UnknownTicket(id)).and_then(|t| ok(StatusCode::OK, &t)))
}

async fn extract(State(state): State<AppState>, Path(id): Path<String>, headers: HeaderMap) -> Response {
    let st = state.clone();
    idempotent(&state, &format!("extract:{id}"), header_key(&headers), || async move {
        let rec = st.ticket(&id).ok_or_else(|| ApiError::UnknownTicket(id.clone()))?;
        let _one_at_a_time = st.inner.extract_lock.lock().await;
        let worker = st.clone();
        blocking(move || {
            let rt = &worker.inner.rt;
            let mut ctx = RequestContext::new(rt.config.budget.budget());
            let report = SopExtractor::new(&rt.gateway, rt.extraction_params())
                .extract_and_integrate(&rec.ticket, rec.labels.as_ref(), rt.hierarchy.sop_store(), &rt.queue, &mut ctx)
                .map_err(|e| match e {
                    ExtractError::EmptyTicket(_) => ApiError::ValidationFailed(e.to_string()),
                    ExtractError::Kb(k) => k.into(),
                    ExtractError::Queue(q) => ApiError::Internal(q.to_string()),
                })?;
            ok(StatusCode::OK, &report)
        })
        .await
    })
    .await
}

// ---- knowledge base

#[derive(Deserialize)]
struct KbQuery {
    level: Option<String>,
    base: Option<String>,
}

#[derive(Serialize)]
struct KbList {
    enabled_levels: Vec<Level>,
    entries: Vec<KnowledgeEntry>,
}

fn parse_level(s: &str) -> Result<Level, ApiError> {
    s.parse::<Level>().map_err(ApiError::ValidationFailed)
}

async fn list_kb(State(state): State<AppState>, Query(q): Query<KbQuery>) -> Response {
    let result = (|| {
        let level = q.level.as_deref().map(parse_level).transpose()?;
        let h = &state.inner.rt.hierarchy;
        let entries = h
            .stores()
            .into_iter()
            .filter(|s| level.is_none_or(|l| s.level() == l))
            .filter(|s| q.base.as_deref().is_none_or(|b| s.base_id() == b))
            .flat_map(|s| s.list())
            .collect();
        ok(StatusCode::OK, &KbList { enabled_levels: h.enabled_levels(), entries })
    })();
    finish(result)
}

async fn get_entry(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    finish(state.inner.rt.hierarchy.entry(&id).ok_or(ApiError::UnknownEntry(id)).and_then(|e| ok(StatusCode::OK, &e)))
}

#[derive(Serialize)]
struct UpsertResponse<'a> {
    id: &'a str,
    level: Level,
    base_id: &'a str,
    created: bool,
}

async fn upsert_entry(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let st = state.clone();
    idempotent(&state, "kb", header_key(&headers), || async move {
        let entry: KnowledgeEntry = parse(&body)?;
        let h = &st.inner.rt.hierarchy;
        let store = match entry.level {
            Level::Sop => h.sop_store().clone(),
            Level::Internal => h
                .store(&entry.base_id)
                .filter(|s| s.level() == Level::Internal)
                .cloned()
                .ok_or_else(|| ApiError::ValidationFailed(format!("no internal knowledge base `{}`", entry.base_id)))?,
            other => return Err(ApiError::ValidationFailed(format!("{other:?} entries cannot be written"))),
        };
        let entry = KnowledgeEntry { base_id: store.base_id().to_string(), ..entry };
        let created = store.get(&entry.id).is_none();
        let (id, level, base) = (entry.id.clone(), entry.level, entry.base_id.clone());
        blocking(move || store.upsert(entry).map_err(ApiError::from)).await?;
        ok(if created { StatusCode::CREATED } else { StatusCode::OK }, &UpsertResponse { id: &id, level, base_id: &base, created })
    })
    .await
}

#[derive(Deserialize)]
struct LevelRequest {
    enabled: bool,
}

#[derive(Serialize)]
struct LevelResponse {
    level: Level,
    enabled: bool,
    enabled_levels: Vec<Level>,
}

async fn set_level(State(state): State<AppState>, Path(level): Path<String>, body: Bytes) -> Response {
    let result = (|| {
        let level = parse_level(&level)?;
        let req: LevelRequest = parse(&body)?;
        let h = &state.inner.rt.hierarchy;
        h.set_level_enabled(level, req.enabled)?;
        ok(StatusCode::OK, &LevelResponse { level, enabled: h.is_enabled(level), enabled_levels: h.enabled_levels() })
    })();
    finish(result)
}
