use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use serde_json::{json, Value};

/// Every failure leaves the service as `{code, message, detail}`.
#[derive(Debug, Clone, PartialEq)]
pub enum ApiError {
    Unauthorized,
    NotFound(String),
    UnknownSession(String),
    UnknownTicket(String),
    UnknownTrace(String),
    UnknownEntry(String),
    SchemaValidation { missing: Vec<String> },
    ValidationFailed(String),
    Conflict(String),
    Internal(String),
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::Unauthorized => StatusCode::UNAUTHORIZED,
            ApiError::NotFound(_)
            | ApiError::UnknownSession(_)
            | ApiError::UnknownTicket(_)
            | ApiError::UnknownTrace(_)
            | ApiError::UnknownEntry(_) => StatusCode::NOT_FOUND,
            ApiError::SchemaValidation { .. } | ApiError::ValidationFailed(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn body(&self) -> ErrorBody {
        let (code, message, detail) = match self {
            ApiError::Unauthorized => ("unauthorized", "missing or invalid bearer token".to_string(), Value::Null),
            ApiError::NotFound(p) => ("not_found", format!("no route for {p}"), Value::Null),
            ApiError::UnknownSession(id) => ("unknown_session", format!("session {id} does not exist"), json!({ "id": id })),
            ApiError::UnknownTicket(id) => ("unknown_ticket", format!("ticket {id} does not exist"), json!({ "id": id })),
            ApiError::UnknownTrace(id) => ("unknown_trace", format!("trace {id} does not exist"), json!({ "id": id })),
            ApiError::UnknownEntry(id) => ("unknown_entry", format!("knowledge entry {id} does not exist"), json!({ "id": id })),
            ApiError::SchemaValidation { missing } => (
                "schema_validation",
                format!("structured context is missing required fields: {}", missing.join(", ")),
                json!({ "missing": missing }),
            ),
            ApiError::ValidationFailed(d) => ("validation_failed", "request failed validation".to_string(), json!(d)),
            ApiError::Conflict(d) => ("conflict", "request conflicts with current state".to_string(), json!(d)),
            ApiError::Internal(d) => ("internal", "internal error".to_string(), json!(d)),
        };
        ErrorBody { code, message, detail }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}

impl From<opsdesk_core::kb::KbError> for ApiError {
    fn from(e: opsdesk_core::kb::KbError) -> Self {
        use opsdesk_core::kb::KbError;
        match e {
            KbError::UnknownReplaceTarget(id) => ApiError::UnknownEntry(id),
            KbError::Io { .. } => ApiError::Internal(e.to_string()),
            other => ApiError::ValidationFailed(other.to_string()),
        }
    }
}
