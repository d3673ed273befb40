use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use hydra_core::analytics::AnalyticsError;
use hydra_core::store::StoreError;
use serde::{Deserialize, Serialize};

/// Error half of every endpoint. Serialized as [`ErrorBody`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ApiError {
    PermissionDenied(String),
    UnknownEntity(String),
    Validation(String),
    /// The store or the files under the image root failed.
    Persistence(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::PermissionDenied(_) => "PermissionDenied",
            ApiError::UnknownEntity(_) => "UnknownEntity",
            ApiError::Validation(_) => "Validation",
            ApiError::Persistence(_) => "PersistenceFault",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::PermissionDenied(_) => StatusCode::FORBIDDEN,
            ApiError::UnknownEntity(_) => StatusCode::NOT_FOUND,
            ApiError::Validation(_) => StatusCode::BAD_REQUEST,
            ApiError::Persistence(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            ApiError::PermissionDenied(m)
            | ApiError::UnknownEntity(m)
            | ApiError::Validation(m)
            | ApiError::Persistence(m) => m,
        }
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code(), self.message())
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if let ApiError::Persistence(m) = &self {
            tracing::error!(error = %m, "request failed");
        }
        let body = ErrorBody { code: self.code().to_string(), message: self.message().to_string() };
        (self.status(), Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let m = e.to_string();
        match e {
            StoreError::PermissionDenied { .. } => ApiError::PermissionDenied(m),
            StoreError::UnknownPlotType(_)
            | StoreError::UnknownLabel(_)
            | StoreError::UnknownImage(_)
            | StoreError::UnknownModel(_)
            | StoreError::UnknownInference(_)
            | StoreError::UnknownTrainingSet(_) => ApiError::UnknownEntity(m),
            StoreError::Io(_) | StoreError::Corrupt { .. } => ApiError::Persistence(m),
            _ => ApiError::Validation(m),
        }
    }
}

impl From<AnalyticsError> for ApiError {
    fn from(e: AnalyticsError) -> Self {
        let m = e.to_string();
        match e {
            AnalyticsError::Store(s) => s.into(),
            AnalyticsError::NoModel(_) => ApiError::UnknownEntity(m),
            AnalyticsError::UnlabeledImage(_)
            | AnalyticsError::EmptyEvaluationSet
            | AnalyticsError::ForeignLabel(_)
            | AnalyticsError::InvalidWindow => ApiError::Validation(m),
            AnalyticsError::Image { .. } | AnalyticsError::Backend(_) => ApiError::Persistence(m),
        }
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::Validation(e.body_text())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::Validation(e.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(e: PathRejection) -> Self {
        ApiError::Validation(e.body_text())
    }
}
