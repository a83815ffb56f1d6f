use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::http::StatusCode;
use chrono::{DateTime, Utc};
use opsdesk_core::pipeline::Session;
use opsdesk_core::runtime::Runtime;
use opsdesk_core::tickets::{Ticket, TicketLabels};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketStatus {
    Pending,
    Categorized,
    NeedsManualLabeling,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TicketRecord {
    pub ticket: Ticket,
    pub status: TicketStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<TicketLabels>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub(crate) struct SessionSlot {
    pub created_at: DateTime<Utc>,
    pub session: Arc<tokio::sync::Mutex<Session>>,
}

/// A stored response for an idempotency key; `None` while the first
/// request is still running.
pub(crate) type IdemSlot = Arc<tokio::sync::Mutex<Option<(StatusCode, Bytes)>>>;

pub(crate) struct Inner {
    pub rt: Runtime,
    pub token: Option<String>,
    pub sessions: Mutex<HashMap<String, SessionSlot>>,
    pub traces: RwLock<HashMap<String, Arc<str>>>,
    pub tickets: Mutex<BTreeMap<String, TicketRecord>>,
    pub idempotency: Mutex<HashMap<String, IdemSlot>>,
    /// Extraction runs one at a time so two tickets never merge into the same SOP concurrently.
    pub extract_lock: tokio::sync::Mutex<()>,
    seq: AtomicU64,
    epoch: i64,
}

/// Shared service state; cheap to clone.
#[derive(Clone)]
pub struct AppState {
    pub(crate) inner: Arc<Inner>,
}

impl AppState {
    /// The bearer token comes from the server configuration.
    pub fn new(rt: Runtime) -> Self {
        let token = rt.config.server.bearer_token.clone().filter(|t| !t.is_empty());
        Self {
            inner: Arc::new(Inner {
                rt,
                token,
                sessions: Mutex::new(HashMap::new()),
                traces: RwLock::new(HashMap::new()),
                tickets: Mutex::new(BTreeMap::new()),
                idempotency: Mutex::new(HashMap::new()),
                extract_lock: tokio::sync::Mutex::new(()),
                seq: AtomicU64::new(0),
                epoch: Utc::now().timestamp_millis(),
            }),
        }
    }

    /// Replace the bearer token; call before the state is shared.
    pub fn with_token(self, token: Option<String>) -> Self {
        let inner = Arc::try_unwrap(self.inner).unwrap_or_else(|_| panic!("with_token must be called before the state is shared"));
        Self { inner: Arc::new(Inner { token, ..inner }) }
    }

    pub fn runtime(&self) -> &Runtime {
        &self.inner.rt
    }

    pub(crate) fn next_id(&self, prefix: &str) -> String {
        let n = self.inner.seq.fetch_add(1, Ordering::SeqCst) + 1;
        format!("{prefix}-{:x}-{n:06}", self.inner.epoch)
    }

    /// Stored trace payload, if any.
    pub fn trace(&self, request_id: &str) -> Option<Arc<str>> {
        self.inner.traces.read().expect("trace lock").get(request_id).cloned()
    }

    /// Traces are written once; a second write for the same id is ignored.
    pub(crate) fn put_trace(&self, request_id: &str, payload: String) {
        self.inner.traces.write().expect("trace lock").entry(request_id.to_string()).or_insert_with(|| payload.into());
    }

    pub fn ticket(&self, id: &str) -> Option<TicketRecord> {
        self.inner.tickets.lock().expect("ticket lock").get(id).cloned()
    }
}
