use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use crs_core::schema::Violation;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Core(#[from] crs_core::Error),

    #[error("record failed validation")]
    Validation(Vec<Violation>),

    #[error("unknown case {0}")]
    UnknownCase(String),

    #[error("unknown rater {0}")]
    UnknownRater(String),

    #[error("missing or unrecognized bearer token")]
    Unauthorized,

    #[error("token does not grant access to {0}")]
    Forbidden(String),

    #[error("no active model is loaded")]
    NoActiveModel,

    #[error("threshold {0} outside {1}")]
    InvalidThreshold(f64, &'static str),

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error("missing artifact {0}; run the command that produces it first")]
    MissingArtifact(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ServeError>;

impl From<serde_json::Error> for ServeError {
    fn from(e: serde_json::Error) -> Self {
        ServeError::Core(e.into())
    }
}

impl ServeError {
    pub fn kind(&self) -> &'static str {
        match self {
            ServeError::Core(e) => e.kind(),
            ServeError::Validation(_) => "ValidationFailed",
            ServeError::UnknownCase(_) => "UnknownCase",
            ServeError::UnknownRater(_) => "UnknownRater",
            ServeError::Unauthorized => "Unauthorized",
            ServeError::Forbidden(_) => "Forbidden",
            ServeError::NoActiveModel => "NoActiveModel",
            ServeError::InvalidThreshold(..) => "InvalidThreshold",
            ServeError::BadRequest(_) => "BadRequest",
            ServeError::MissingArtifact(_) => "MissingArtifact",
            ServeError::Config(_) => "InvalidConfig",
            ServeError::Io(_) => "Io",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServeError::Validation(_) | ServeError::InvalidThreshold(..) => StatusCode::UNPROCESSABLE_ENTITY,
            ServeError::Core(crs_core::Error::MalformedConfidence(_)) => StatusCode::UNPROCESSABLE_ENTITY,
            ServeError::UnknownCase(_) | ServeError::UnknownRater(_) => StatusCode::NOT_FOUND,
            ServeError::Unauthorized => StatusCode::UNAUTHORIZED,
            ServeError::Forbidden(_) => StatusCode::FORBIDDEN,
            ServeError::NoActiveModel => StatusCode::CONFLICT,
            ServeError::BadRequest(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    /// Machine-readable record used by both the HTTP layer and the CLI.
    pub fn record(&self) -> ErrorRecord {
        ErrorRecord {
            error: self.kind().to_string(),
            message: self.to_string(),
            violations: match self {
                ServeError::Validation(v) => v.clone(),
                _ => Vec::new(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct ErrorRecord {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
}

impl IntoResponse for ServeError {
    fn into_response(self) -> Response {
        if self.status() == StatusCode::INTERNAL_SERVER_ERROR {
            tracing::error!(kind = self.kind(), "{self}");
        }
        (self.status(), Json(self.record())).into_response()
    }
}
