//! REST surface under /api/v1. Every route except account creation and
//! login requires `Authorization: Bearer <token>`.

use std::sync::Arc;
use std::time::Duration as StdDuration;

use axum::body::Bytes;
use axum::extract::{FromRequest, FromRequestParts, Path, Request};
use axum::http::header::{AUTHORIZATION, CONTENT_TYPE};
use axum::http::request::Parts;
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{delete, get, post, put};
use axum::{Json, Router};
use fedsilo_core::api::{
    CreateAccountRequest, CreateFederationRequest, DataDistributionRequest, EndpointRecord,
    HeartbeatResponse, InviteRequest, LoginRequest, RegisterEndpointRequest, RegisterEndpointResponse,
    ResourceMetrics, Role, TaskResult,
};
use fedsilo_core::ExperimentConfig;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::{ApiError, ApiResult};
use crate::iam::{Principal, Scope};
use crate::AppState;

type State = axum::extract::State<Arc<AppState>>;

/// Upper bound on uploaded model blobs.
pub const MAX_BLOB_BYTES: usize = 512 * 1024 * 1024;

/// Every route as (method, path template). Used by tests that probe the
/// whole surface.
pub const ROUTES: &[(&str, &str)] = &[
    ("POST", "/api/v1/auth/accounts"),
    ("POST", "/api/v1/auth/login"),
    ("POST", "/api/v1/auth/logout"),
    ("GET", "/api/v1/auth/whoami"),
    ("GET", "/api/v1/federations"),
    ("POST", "/api/v1/federations"),
    ("GET", "/api/v1/federations/{id}"),
    ("POST", "/api/v1/federations/{id}/invitations"),
    ("POST", "/api/v1/federations/{id}/accept"),
    ("DELETE", "/api/v1/federations/{id}/members/{account_id}"),
    ("GET", "/api/v1/federations/{id}/endpoints"),
    ("POST", "/api/v1/federations/{id}/data-distribution"),
    ("POST", "/api/v1/endpoints"),
    ("GET", "/api/v1/endpoints/{id}"),
    ("GET", "/api/v1/endpoints/{id}/tasks"),
    ("POST", "/api/v1/endpoints/{id}/heartbeat"),
    ("POST", "/api/v1/tasks/{id}/result"),
    ("PUT", "/api/v1/blobs"),
    ("GET", "/api/v1/blobs/{digest}"),
    ("GET", "/api/v1/experiments"),
    ("POST", "/api/v1/experiments"),
    ("GET", "/api/v1/experiments/compare"),
    ("GET", "/api/v1/experiments/{id}"),
    ("GET", "/api/v1/experiments/{id}/logs"),
    ("GET", "/api/v1/experiments/{id}/report"),
    ("POST", "/api/v1/experiments/{id}/cancel"),
];

/// Routes reachable without a token.
pub const PUBLIC_ROUTES: &[(&str, &str)] = &[
    ("POST", "/api/v1/auth/accounts"),
    ("POST", "/api/v1/auth/login"),
];

/// The authenticated caller.
pub struct Auth(pub Principal);

impl FromRequestParts<Arc<AppState>> for Auth {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<AppState>) -> Result<Self, ApiError> {
        let header = parts
            .headers
            .get(AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .ok_or(ApiError::Unauthorized)?;
        let token = header
            .strip_prefix("Bearer ")
            .ok_or(ApiError::Unauthorized)?;
        state.iam.authenticate(token.trim()).map(Auth)
    }
}

/// JSON body whose parse errors are reported as ApiError.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| Body(v))
            .map_err(|e| ApiError::InvalidRequest(e.body_text()))
    }
}

/// Query string whose parse errors are reported as ApiError.
pub struct Query<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequestParts<S> for Query<T> {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, ApiError> {
        axum::extract::Query::<T>::from_request_parts(parts, state)
            .await
            .map(|axum::extract::Query(v)| Query(v))
            .map_err(|e| ApiError::InvalidRequest(e.body_text()))
    }
}

pub fn api_router() -> Router<Arc<AppState>> {
    Router::new()
        .route("/api/v1/auth/accounts", post(create_account))
        .route("/api/v1/auth/login", post(login))
        .route("/api/v1/auth/logout", post(logout))
        .route("/api/v1/auth/whoami", get(whoami))
        .route("/api/v1/federations", get(list_federations).post(create_federation))
        .route("/api/v1/federations/{id}", get(get_federation))
        .route("/api/v1/federations/{id}/invitations", post(invite))
        .route("/api/v1/federations/{id}/accept", post(accept))
        .route("/api/v1/federations/{id}/members/{account_id}", delete(remove_member))
        .route("/api/v1/federations/{id}/endpoints", get(list_endpoints))
        .route("/api/v1/federations/{id}/data-distribution", post(data_distribution))
        .route("/api/v1/endpoints", post(register_endpoint))
        .route("/api/v1/endpoints/{id}", get(get_endpoint))
        .route("/api/v1/endpoints/{id}/tasks", get(poll_tasks))
        .route("/api/v1/endpoints/{id}/heartbeat", post(heartbeat))
        .route("/api/v1/tasks/{id}/result", post(submit_result))
        .route(
            "/api/v1/blobs",
            put(put_blob).layer(axum::extract::DefaultBodyLimit::max(MAX_BLOB_BYTES)),
        )
        .route("/api/v1/blobs/{digest}", get(get_blob))
        .route("/api/v1/experiments", get(list_experiments).post(launch))
        .route("/api/v1/experiments/compare", get(compare))
        .route("/api/v1/experiments/{id}", get(get_experiment))
        .route("/api/v1/experiments/{id}/logs", get(logs))
        .route("/api/v1/experiments/{id}/report", get(report))
        .route("/api/v1/experiments/{id}/cancel", post(cancel))
        .fallback(not_found)
}

async fn not_found(req: Request) -> Response {
    if req.uri().path().starts_with("/api/") {
        let err = ApiError::InvalidRequest(format!("no route {} {}", req.method(), req.uri().path()));
        return (StatusCode::NOT_FOUND, Json(err.body())).into_response();
    }
    Html(INDEX_PAGE).into_response()
}

/// Served at / when no dashboard bundle is configured.
pub const INDEX_PAGE: &str = "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>fedsilo</title></head>\n<body><h1>fedsilo</h1><p>The API is served under <code>/api/v1</code>. No dashboard bundle is installed; start the server with <code>--static-dir</code> to serve one.</p></body></html>\n";

// ------------------------------------------------------------------ auth

async fn create_account(s: State, Body(req): Body<CreateAccountRequest>) -> ApiResult<Response> {
    let account = s.iam.create_account(&req)?;
    Ok((StatusCode::CREATED, Json(account)).into_response())
}

async fn login(s: State, Body(req): Body<LoginRequest>) -> ApiResult<Response> {
    Ok(Json(s.iam.login(&req)?).into_response())
}

async fn logout(s: State, Auth(p): Auth) -> ApiResult<StatusCode> {
    s.iam.logout(&p)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn whoami(s: State, Auth(p): Auth) -> ApiResult<Response> {
    p.require(Scope::Api)?;
    Ok(Json(s.iam.whoami(&p)?).into_response())
}

// ----------------------------------------------------------- federations

async fn list_federations(s: State, Auth(p): Auth) -> ApiResult<Response> {
    p.require(Scope::Api)?;
    Ok(Json(s.iam.whoami(&p)?.federations).into_response())
}

async fn create_federation(
    s: State,
    Auth(p): Auth,
    Body(req): Body<CreateFederationRequest>,
) -> ApiResult<Response> {
    let fed = s.iam.create_federation(&p, &req.name)?;
    Ok((StatusCode::CREATED, Json(fed)).into_response())
}

async fn get_federation(s: State, Auth(p): Auth, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(s.iam.federation(&p, &id)?).into_response())
}

async fn invite(
    s: State,
    Auth(p): Auth,
    Path(id): Path<String>,
    Body(req): Body<InviteRequest>,
) -> ApiResult<Response> {
    let membership = s.iam.invite(&p, &id, &req.email)?;
    Ok((StatusCode::CREATED, Json(membership)).into_response())
}

async fn accept(s: State, Auth(p): Auth, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(s.iam.accept(&p, &id)?).into_response())
}

async fn remove_member(
    s: State,
    Auth(p): Auth,
    Path((id, account_id)): Path<(String, String)>,
) -> ApiResult<StatusCode> {
    let endpoints = s.iam.remove_member(&p, &id, &account_id)?;
    let withdrawn = s.orchestrator.withdraw_endpoint_tasks(&endpoints);
    tracing::info!(federation = %id, account = %account_id, endpoints = endpoints.len(), withdrawn, "member removed");
    Ok(StatusCode::NO_CONTENT)
}

/// Admins see every endpoint of the federation; members see their own.
async fn list_endpoints(s: State, Auth(p): Auth, Path(id): Path<String>) -> ApiResult<Response> {
    let account = s.iam.authorize(&p, &id, Role::Member, Scope::Api)?;
    let admin = s.iam.is_admin(&account, &id);
    let endpoints: Vec<EndpointRecord> = s
        .dispatch
        .endpoints_in(&id)
        .into_iter()
        .filter(|e| admin || e.owner_account_id == account)
        .collect();
    Ok(Json(endpoints).into_response())
}

async fn data_distribution(
    s: State,
    Auth(p): Auth,
    Path(id): Path<String>,
    Body(req): Body<DataDistributionRequest>,
) -> ApiResult<Response> {
    s.iam.authorize(&p, &id, Role::Admin, Scope::Api)?;
    let classes = req.model_spec.map(|m| m.num_classes);
    let histograms = s
        .orchestrator
        .collect_data_distribution(&id, &req.roster, classes)
        .await?;
    Ok(Json(histograms).into_response())
}

// ------------------------------------------------------ endpoints, tasks

async fn register_endpoint(
    s: State,
    Auth(p): Auth,
    Body(req): Body<RegisterEndpointRequest>,
) -> ApiResult<Response> {
    let account = s.iam.authorize(&p, &req.federation_id, Role::Member, Scope::Api)?;
    if req.name.trim().is_empty() {
        return Err(ApiError::InvalidRequest("endpoint name must not be empty".into()));
    }
    let endpoint = s
        .dispatch
        .register(&req.federation_id, &account, req.name.trim(), req.device_type)?;
    let agent_token = s
        .iam
        .issue_agent_token(&account, &req.federation_id, &endpoint.endpoint_id)?;
    Ok((
        StatusCode::CREATED,
        Json(RegisterEndpointResponse { endpoint, agent_token }),
    )
        .into_response())
}

async fn get_endpoint(s: State, Auth(p): Auth, Path(id): Path<String>) -> ApiResult<Response> {
    if p.has_scope(Scope::Agent) {
        p.require_endpoint(&id)?;
        return Ok(Json(s.dispatch.endpoint(&id)?).into_response());
    }
    let endpoint = s.dispatch.endpoint(&id).map_err(|_| ApiError::forbidden("no access to this endpoint"))?;
    let account = s.iam.authorize(&p, &endpoint.federation_id, Role::Member, Scope::Api)?;
    if endpoint.owner_account_id != account && !s.iam.is_admin(&account, &endpoint.federation_id) {
        return Err(ApiError::forbidden("no access to this endpoint"));
    }
    Ok(Json(endpoint).into_response())
}

#[derive(Deserialize)]
struct PollQuery {
    #[serde(default)]
    wait: f64,
    #[serde(default = "one")]
    max: usize,
}

fn one() -> usize {
    1
}

async fn poll_tasks(
    s: State,
    Auth(p): Auth,
    Path(id): Path<String>,
    Query(q): Query<PollQuery>,
) -> ApiResult<Response> {
    p.require_endpoint(&id)?;
    if !(q.wait.is_finite() && q.wait >= 0.0) {
        return Err(ApiError::InvalidRequest("wait must be a non-negative number of seconds".into()));
    }
    let tasks = s
        .dispatch
        .poll(&id, StdDuration::from_secs_f64(q.wait), q.max)
        .await?;
    Ok(Json(tasks).into_response())
}

async fn heartbeat(
    s: State,
    Auth(p): Auth,
    Path(id): Path<String>,
    Body(metrics): Body<ResourceMetrics>,
) -> ApiResult<Response> {
    p.require_endpoint(&id)?;
    let status = s.dispatch.heartbeat(&id, metrics)?;
    let interval_s = Some(s.dispatch.heartbeat_interval().num_milliseconds() as f64 / 1000.0);
    Ok(Json(HeartbeatResponse { status, interval_s }).into_response())
}

async fn submit_result(
    s: State,
    Auth(p): Auth,
    Path(id): Path<String>,
    Body(result): Body<TaskResult>,
) -> ApiResult<StatusCode> {
    p.require(Scope::Agent)?;
    let endpoint_id = p.endpoint_id.clone().ok_or(ApiError::Unauthorized)?;
    if result.task_id != id {
        return Err(ApiError::InvalidRequest("task_id in body differs from the path".into()));
    }
    s.dispatch.submit(&endpoint_id, result)?;
    Ok(StatusCode::NO_CONTENT)
}

// ----------------------------------------------------------------- blobs

#[derive(Deserialize)]
struct BlobQuery {
    federation_id: Option<String>,
}

async fn put_blob(s: State, Auth(p): Auth, Query(q): Query<BlobQuery>, bytes: Bytes) -> ApiResult<Response> {
    let federation_id = if p.has_scope(Scope::Agent) {
        p.federation_id.clone().ok_or(ApiError::Unauthorized)?
    } else {
        let id = q
            .federation_id
            .ok_or_else(|| ApiError::InvalidRequest("federation_id query parameter is required".into()))?;
        s.iam.authorize(&p, &id, Role::Member, Scope::Api)?;
        id
    };
    let digest = s.blobs.put(&federation_id, &bytes)?;
    Ok((StatusCode::CREATED, Json(digest)).into_response())
}

async fn get_blob(s: State, Auth(p): Auth, Path(digest): Path<String>) -> ApiResult<Response> {
    let federations = match &p.federation_id {
        Some(f) if p.has_scope(Scope::Agent) => vec![f.clone()],
        _ => s.iam.active_federations(&p.account_id),
    };
    if !s.blobs.readable_by(&digest, federations.iter().map(String::as_str)) {
        return Err(if s.blobs.exists(&digest) {
            ApiError::Forbidden(format!("blob {digest} belongs to another federation"))
        } else {
            ApiError::NoSuchBlob(digest)
        });
    }
    let bytes = s.blobs.get(&digest)?;
    Ok(([(CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

// ----------------------------------------------------------- experiments

#[derive(Deserialize)]
struct FederationQuery {
    federation_id: String,
}

async fn list_experiments(s: State, Auth(p): Auth, Query(q): Query<FederationQuery>) -> ApiResult<Response> {
    s.iam.authorize(&p, &q.federation_id, Role::Member, Scope::Api)?;
    Ok(Json(s.orchestrator.list(&q.federation_id)).into_response())
}

async fn launch(s: State, Auth(p): Auth, body: Bytes) -> ApiResult<Response> {
    p.require(Scope::Api)?;
    let config: ExperimentConfig = serde_json::from_slice(&body).map_err(|e| {
        ApiError::InvalidConfig(vec![fedsilo_core::FieldError::new("config", e.to_string())])
    })?;
    s.iam.authorize(&p, &config.federation_id, Role::Admin, Scope::Api)?;
    let record = s.orchestrator.launch(config)?;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

/// Resolves the experiment and checks the caller is an active member (or,
/// with `admin`, the admin) of its federation.
fn visible(s: &AppState, p: &Principal, id: &str, role: Role) -> ApiResult<Arc<crate::orchestrator::Experiment>> {
    p.require(Scope::Api)?;
    let exp = s.orchestrator.get(id)?;
    s.iam.authorize(p, &exp.federation_id, role, Scope::Api)?;
    Ok(exp)
}

async fn get_experiment(s: State, Auth(p): Auth, Path(id): Path<String>) -> ApiResult<Response> {
    let exp = visible(&s, &p, &id, Role::Member)?;
    Ok(Json(exp.snapshot()).into_response())
}

#[derive(Deserialize)]
struct LogsQuery {
    #[serde(default)]
    from: u64,
    #[serde(default)]
    wait: f64,
}

async fn logs(s: State, Auth(p): Auth, Path(id): Path<String>, Query(q): Query<LogsQuery>) -> ApiResult<Response> {
    visible(&s, &p, &id, Role::Member)?;
    if !(q.wait.is_finite() && q.wait >= 0.0) {
        return Err(ApiError::InvalidRequest("wait must be a non-negative number of seconds".into()));
    }
    let response = s
        .orchestrator
        .logs(&id, q.from, StdDuration::from_secs_f64(q.wait))
        .await?;
    Ok(Json(response).into_response())
}

#[derive(Deserialize)]
struct FormatQuery {
    #[serde(default)]
    format: Option<String>,
}

fn wants_csv(format: &Option<String>) -> ApiResult<bool> {
    match format.as_deref() {
        None | Some("json") => Ok(false),
        Some("csv") => Ok(true),
        Some(other) => Err(ApiError::InvalidRequest(format!("unknown format {other:?}; use json or csv"))),
    }
}

fn csv_response(text: String) -> Response {
    ([(CONTENT_TYPE, "text/csv; charset=utf-8")], text).into_response()
}

async fn report(
    s: State,
    Auth(p): Auth,
    Path(id): Path<String>,
    Query(q): Query<FormatQuery>,
) -> ApiResult<Response> {
    visible(&s, &p, &id, Role::Member)?;
    let csv = wants_csv(&q.format)?;
    let report = s.orchestrator.report(&id)?;
    Ok(if csv {
        csv_response(report.to_csv())
    } else {
        Json(report).into_response()
    })
}

#[derive(Deserialize)]
struct CompareQuery {
    ids: String,
    #[serde(default)]
    format: Option<String>,
}

async fn compare(s: State, Auth(p): Auth, Query(q): Query<CompareQuery>) -> ApiResult<Response> {
    let ids: Vec<String> = q
        .ids
        .split(',')
        .map(str::trim)
        .filter(|id| !id.is_empty())
        .map(String::from)
        .collect();
    for id in &ids {
        visible(&s, &p, id, Role::Member)?;
    }
    let csv = wants_csv(&q.format)?;
    let comparison = s.orchestrator.compare(&ids)?;
    Ok(if csv {
        csv_response(comparison.to_csv())
    } else {
        Json(comparison).into_response()
    })
}

async fn cancel(s: State, Auth(p): Auth, Path(id): Path<String>) -> ApiResult<Response> {
    visible(&s, &p, &id, Role::Admin)?;
    Ok(Json(s.orchestrator.cancel(&id)?).into_response())
}
