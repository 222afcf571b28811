use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("a session is already running")]
    AlreadyRunning,
    #[error("no session is running")]
    NotRunning,
    #[error("invalid message: {0}")]
    Schema(String),
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("control queue is full")]
    QueueFull,
    #[error("no completion to decode yet")]
    NoCompletion,
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::AlreadyRunning => "already_running",
            ServiceError::NotRunning => "not_running",
            ServiceError::Schema(_) => "schema",
            ServiceError::Rejected(_) => "rejected",
            ServiceError::QueueFull => "queue_full",
            ServiceError::NoCompletion => "no_completion",
            ServiceError::Internal(_) => "internal",
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            ServiceError::AlreadyRunning | ServiceError::NotRunning => StatusCode::CONFLICT,
            ServiceError::Schema(_) => StatusCode::BAD_REQUEST,
            ServiceError::Rejected(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::QueueFull => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::NoCompletion => StatusCode::NOT_FOUND,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<ringflow_core::Error> for ServiceError {
    fn from(e: ringflow_core::Error) -> Self {
        ServiceError::Rejected(e.to_string())
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.code(), "message": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}
