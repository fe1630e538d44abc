use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

/// Body of every error reply.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("{status}: {code}: {message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    pub field: Option<String>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>, field: Option<&str>) -> Self {
        Self {
            status,
            code: code.to_string(),
            message: message.into(),
            field: field.map(str::to_string),
        }
    }

    pub fn bad_request(code: &str, message: impl Into<String>, field: Option<&str>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message, field)
    }

    pub fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NotFound", format!("no session {id:?}"), None)
    }

    pub fn stale(expected: u64, found: u64) -> Self {
        Self::new(
            StatusCode::CONFLICT,
            "StaleRevision",
            format!("revision {found} is stale; current revision is {expected}"),
            Some("revision"),
        )
    }
}

impl From<oedct::Error> for ApiError {
    fn from(e: oedct::Error) -> Self {
        use oedct::Error as E;
        let status = match &e {
            E::InvalidConfig { .. } | E::InadmissibleDesign { .. } | E::Parse(_) | E::DimensionMismatch { .. } => StatusCode::BAD_REQUEST,
            E::EmptyRoi | E::AllCandidatesBlocked | E::NotPositiveDefinite { .. } | E::Divergence { .. } | E::EmptyOperator => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            E::SessionStopped | E::NoPendingDesign => StatusCode::CONFLICT,
            E::PrecompStale | E::PrecisionUnavailable | E::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let field = match &e {
            E::InvalidConfig { field, .. } => Some(field.clone()),
            E::EmptyRoi => Some("roi".to_string()),
            _ => None,
        };
        Self {
            status,
            code: e.code().to_string(),
            message: e.to_string(),
            field,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code,
            message: self.message,
            field: self.field,
        };
        (self.status, Json(body)).into_response()
    }
}
