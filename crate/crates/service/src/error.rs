use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use sbx_core::workspace::WorkspaceError;
use serde::Serialize;
use serde_json::Value;

/// Error body of every failed request.
#[derive(Debug, Clone, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub http_status: StatusCode,
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub details: Value,
}

/// HTTP status for each stable error code.
pub fn status_for(code: &str) -> StatusCode {
    match code {
        "bad_request" => StatusCode::BAD_REQUEST,
        "unauthenticated" => StatusCode::UNAUTHORIZED,
        "forbidden" => StatusCode::FORBIDDEN,
        "not_found" => StatusCode::NOT_FOUND,
        "idempotency_conflict" | "illegal_transition" | "run_unfinished" => StatusCode::CONFLICT,
        "parse_error" | "validation_failed" | "plan_rejected" | "catalogue_rejected" | "run_rejected" | "report_rejected" => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl ApiError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        ApiError { http_status: status_for(code), code: code.to_string(), message: message.into(), details: Value::Null }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new("bad_request", message)
    }
}

impl From<WorkspaceError> for ApiError {
    fn from(e: WorkspaceError) -> Self {
        let details = match &e {
            WorkspaceError::Invalid(report) => serde_json::to_value(report).unwrap_or(Value::Null),
            _ => Value::Null,
        };
        ApiError::new(e.code(), e.to_string()).with_details(details)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.http_status, Json(self)).into_response()
    }
}
