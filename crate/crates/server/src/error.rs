use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

/// Error body returned by every route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

pub type ApiResult<T> = Result<T, ApiError>;

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    pub fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no session `{id}`"))
    }

    pub fn unknown_utility(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_utility", format!("no utility table `{id}`"))
    }

    pub fn unknown_scenario(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_scenario", format!("no scenario `{id}`"))
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    pub fn finished() -> Self {
        Self::new(StatusCode::CONFLICT, "session_finished", "the episode is over")
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", message)
    }

    pub fn no_decisions() -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "no_decisions", "the session has no driver decisions yet")
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<stackdrive::Error> for ApiError {
    fn from(e: stackdrive::Error) -> Self {
        use stackdrive::Error as E;
        match e {
            E::InvalidScenario(_) | E::InvalidParams(_) | E::TableShape { .. } | E::Parse(_) | E::UnknownDriverType(_) => {
                Self::validation(e.to_string())
            }
            E::InsufficientSamples { .. } => Self::no_decisions(),
            other => Self::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { code: self.code.to_string(), message: self.message })).into_response()
    }
}
