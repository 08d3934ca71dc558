use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use fedsilo_core::api::ErrorBody;
use fedsilo_core::FieldError;
use thiserror::Error;

/// Every failure the API can report. The variant decides the HTTP status and
/// the stable `error` code in the response body.
#[derive(Debug, Error)]
pub enum ApiError {
    #[error("missing, invalid, expired or revoked token")]
    Unauthorized,
    #[error("{0}")]
    Forbidden(String),
    #[error("invalid email or password")]
    BadCredentials,
    #[error("an account with this email already exists")]
    DuplicateEmail,
    #[error("password must be at least {0} characters")]
    WeakPassword(usize),
    #[error("only the federation admin may do this")]
    NotAdmin,
    #[error("account is already a member of this federation")]
    AlreadyMember,
    #[error("no pending invitation for this federation")]
    NoSuchInvitation,
    #[error("no account with email {0}")]
    NoSuchAccount(String),
    #[error("no federation {0}")]
    NoSuchFederation(String),
    #[error("an endpoint named {0:?} already exists in this federation")]
    DuplicateEndpointName(String),
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(String),
    #[error("unknown or expired task {0}")]
    UnknownTask(String),
    #[error("a result for task {0} was already accepted")]
    DuplicateResult(String),
    #[error("endpoint {endpoint_id} belongs to another federation than experiment {experiment_id}")]
    CrossFederationDispatch {
        endpoint_id: String,
        experiment_id: String,
    },
    #[error("no blob {0}")]
    NoSuchBlob(String),
    #[error("stored blob {0} does not match its digest")]
    DigestMismatch(String),
    #[error("invalid experiment configuration")]
    InvalidConfig(Vec<FieldError>),
    #[error("endpoints offline: {}", .0.join(", "))]
    EndpointOffline(Vec<String>),
    #[error("no experiment {0}")]
    NoSuchExperiment(String),
    #[error("{0}")]
    InvalidRequest(String),
    #[error("{0}")]
    Conflict(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::Unauthorized => "unauthorized",
            ApiError::Forbidden(_) => "forbidden",
            ApiError::BadCredentials => "bad_credentials",
            ApiError::DuplicateEmail => "duplicate_email",
            ApiError::WeakPassword(_) => "weak_password",
            ApiError::NotAdmin => "not_admin",
            ApiError::AlreadyMember => "already_member",
            ApiError::NoSuchInvitation => "no_such_invitation",
            ApiError::NoSuchAccount(_) => "no_such_account",
            ApiError::NoSuchFederation(_) => "no_such_federation",
            ApiError::DuplicateEndpointName(_) => "duplicate_endpoint_name",
            ApiError::UnknownEndpoint(_) => "unknown_endpoint",
            ApiError::UnknownTask(_) => "unknown_task",
            ApiError::DuplicateResult(_) => "duplicate_result",
            ApiError::CrossFederationDispatch { .. } => "cross_federation_dispatch",
            ApiError::NoSuchBlob(_) => "no_such_blob",
            ApiError::DigestMismatch(_) => "digest_mismatch",
            ApiError::InvalidConfig(_) => "invalid_config",
            ApiError::EndpointOffline(_) => "endpoint_offline",
            ApiError::NoSuchExperiment(_) => "no_such_experiment",
            ApiError::InvalidRequest(_) => "invalid_request",
            ApiError::Conflict(_) => "conflict",
            ApiError::Internal(_) => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::Unauthorized | ApiError::BadCredentials => StatusCode::UNAUTHORIZED,
            ApiError::Forbidden(_)
            | ApiError::NotAdmin
            | ApiError::NoSuchInvitation
            | ApiError::CrossFederationDispatch { .. } => StatusCode::FORBIDDEN,
            ApiError::NoSuchAccount(_)
            | ApiError::NoSuchFederation(_)
            | ApiError::UnknownEndpoint(_)
            | ApiError::UnknownTask(_)
            | ApiError::NoSuchBlob(_)
            | ApiError::NoSuchExperiment(_) => StatusCode::NOT_FOUND,
            ApiError::DuplicateEmail
            | ApiError::AlreadyMember
            | ApiError::DuplicateEndpointName(_)
            | ApiError::DuplicateResult(_)
            | ApiError::EndpointOffline(_)
            | ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::WeakPassword(_) | ApiError::InvalidConfig(_) | ApiError::InvalidRequest(_) => {
                StatusCode::BAD_REQUEST
            }
            ApiError::DigestMismatch(_) | ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            error: self.code().to_string(),
            message: self.to_string(),
            fields: match self {
                ApiError::InvalidConfig(fields) => fields.clone(),
                _ => Vec::new(),
            },
        }
    }

    pub fn forbidden(msg: impl Into<String>) -> Self {
        ApiError::Forbidden(msg.into())
    }

    pub fn internal(err: impl std::fmt::Display) -> Self {
        ApiError::Internal(err.to_string())
    }
}

impl From<crate::store::StoreError> for ApiError {
    fn from(e: crate::store::StoreError) -> Self {
        ApiError::internal(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status().is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        (self.status(), Json(self.body())).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
