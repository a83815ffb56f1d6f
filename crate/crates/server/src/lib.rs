//! HTTP JSON service over the opsdesk runtime.
//!
//! Routes (all under `/v1`, JSON in and out):
//!
//! | method | path                          | purpose                                   |
//! |--------|-------------------------------|-------------------------------------------|
//! | GET    | /health                       | liveness, no auth                         |
//! | POST   | /sessions                     | create a chat session                     |
//! | GET    | /sessions/{id}                | session turns, for reloads                |
//! | POST   | /sessions/{id}/messages       | one pipeline turn                         |
//! | POST   | /sessions/{id}/escalate       | file the conversation as a ticket         |
//! | POST   | /diagnose                     | console diagnosis from structured context |
//! | POST   | /tickets                      | ingest; categorized in the background     |
//! | GET    | /tickets/{id}                 | ticket with categorization status         |
//! | POST   | /tickets/{id}/extract         | SOP extraction, returns the delta report  |
//! | GET    | /kb                           | list entries (`level`, `base` filters)    |
//! | GET    | /kb/entries/{id}              | one entry                                 |
//! | PUT    | /kb/entries                   | add or overwrite an entry                 |
//! | PUT    | /kb/levels/{level}            | enable or disable sop, internal or web    |
//! | GET    | /traces/{request_id}          | stored trace, byte for byte               |
//!
//! Mutating routes honour an `Idempotency-Key` header: a replay returns the
//! stored response without running the handler again.

mod error;
mod routes;
mod state;

pub use error::{ApiError, ErrorBody};
pub use routes::router;
pub use state::{AppState, TicketRecord, TicketStatus};

/// Bind and serve until the process is stopped.
pub async fn serve(state: AppState, listen: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}
