use axum::extract::rejection::{BytesRejection, JsonRejection};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use thiserror::Error;

use trajkd_core::evaluation::EvaluationError;
use trajkd_core::kdb::KdbError;
use trajkd_core::pipeline::PipelineError;
use trajkd_core::trajectory::IngestError;

use crate::api::API_SCHEMA_VERSION;
use crate::config::ConfigError;

/// Startup failures of the service process.
#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot restore {what}: {message}")]
    Restore { what: String, message: String },
}

/// An error response: HTTP status plus a stable machine-readable code.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    pub details: Option<serde_json::Value>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    schema_version: u32,
    code: &'a str,
    message: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    details: Option<&'a serde_json::Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.into(),
            message: message.into(),
            details: None,
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("{what} {id} not found"))
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    pub fn with_details(mut self, details: serde_json::Value) -> Self {
        self.details = Some(details);
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            schema_version: API_SCHEMA_VERSION,
            code: &self.code,
            message: &self.message,
            details: self.details.as_ref(),
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match e {
            PipelineError::NothingToUndo => StatusCode::CONFLICT,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        let mut err = ApiError::new(status, e.code(), e.to_string());
        if let PipelineError::Step { step_id, .. } | PipelineError::BrokenReference { step_id, .. } = &e {
            err = err.with_details(serde_json::json!({ "step_id": step_id }));
        }
        err
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        let details = match &e {
            IngestError::Parse { line, column, value } => {
                Some(serde_json::json!({ "line": line, "column": column, "value": value }))
            }
            IngestError::IncompleteTracks { object_ids, min, max } => {
                Some(serde_json::json!({ "object_ids": object_ids, "frame_min": min, "frame_max": max }))
            }
            IngestError::DuplicateFrame { object_id, frame } => {
                Some(serde_json::json!({ "object_id": object_id, "frame": frame }))
            }
            _ => None,
        };
        let err = ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "ingest_error", e.to_string());
        match details {
            Some(d) => err.with_details(d),
            None => err,
        }
    }
}

impl From<EvaluationError> for ApiError {
    fn from(e: EvaluationError) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "evaluation_error", e.to_string())
    }
}

impl From<KdbError> for ApiError {
    fn from(e: KdbError) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_kdb", e.to_string())
    }
}

fn rejection(status: StatusCode, text: String) -> ApiError {
    let code = if status == StatusCode::PAYLOAD_TOO_LARGE {
        "payload_too_large"
    } else {
        "invalid_request"
    };
    ApiError::new(status, code, text)
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        rejection(e.status(), e.body_text())
    }
}

impl From<BytesRejection> for ApiError {
    fn from(e: BytesRejection) -> Self {
        rejection(e.status(), e.body_text())
    }
}
