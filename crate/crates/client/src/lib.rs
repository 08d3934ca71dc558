//! Blocking client for the fedsilo REST API, shared by the CLI and the agent.

use std::collections::BTreeMap;
use std::time::Duration;

use fedsilo_core::api::{
    AccountView, BlobDigest, ComparisonReport, CreateAccountRequest, CreateFederationRequest,
    DataDistributionRequest, DeviceType, EndpointRecord, ErrorBody, ExperimentRecord, ExperimentSummary,
    FederationView, HeartbeatResponse, InviteRequest, LabelHistogram, LoginRequest, LogsResponse,
    Membership, RegisterEndpointRequest, RegisterEndpointResponse, Report, ResourceMetrics, TaskEnvelope,
    TaskResult, TokenResponse, WhoAmI,
};
use fedsilo_core::ExperimentConfig;
use reqwest::blocking::{RequestBuilder, Response};
use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

/// Slack added to long-poll waits before the HTTP request itself times out.
const POLL_SLACK: Duration = Duration::from_secs(30);
const REQUEST_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Error)]
pub enum ClientError {
    /// The server answered with an error body.
    #[error("{} ({}): {}", .body.error, .status, .body.message)]
    Api { status: u16, body: ErrorBody },
    /// The server could not be reached or the connection broke.
    #[error("cannot reach server: {0}")]
    Transport(#[source] reqwest::Error),
    #[error("unexpected response: {0}")]
    Decode(String),
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }

    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { body, .. } => Some(&body.error),
            _ => None,
        }
    }

    /// Worth retrying: the server was unreachable or failed internally.
    pub fn is_transient(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Api { status, .. } => *status >= 500 || *status == 429,
            ClientError::Decode(_) => false,
        }
    }

    /// The token was rejected.
    pub fn is_auth(&self) -> bool {
        matches!(self.status(), Some(401) | Some(403))
    }
}

pub type ClientResult<T> = Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    token: Option<String>,
    http: reqwest::blocking::Client,
}

impl Client {
    pub fn new(server_url: &str, token: Option<String>) -> Self {
        let http = reqwest::blocking::Client::builder()
            .timeout(REQUEST_TIMEOUT)
            .build()
            .expect("http client builds");
        Self {
            base: server_url.trim_end_matches('/').to_string(),
            token,
            http,
        }
    }

    pub fn server_url(&self) -> &str {
        &self.base
    }

    pub fn token(&self) -> Option<&str> {
        self.token.as_deref()
    }

    pub fn with_token(&self, token: impl Into<String>) -> Self {
        Self {
            token: Some(token.into()),
            ..self.clone()
        }
    }

    fn request(&self, method: Method, path: &str) -> RequestBuilder {
        let req = self.http.request(method, format!("{}{}", self.base, path));
        match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        }
    }

    fn send(req: RequestBuilder) -> ClientResult<Response> {
        let resp = req.send().map_err(ClientError::Transport)?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().map_err(ClientError::Transport)?;
        let body = serde_json::from_str::<ErrorBody>(&text).unwrap_or_else(|_| ErrorBody {
            error: status
                .canonical_reason()
                .unwrap_or("HttpError")
                .replace(' ', ""),
            message: text,
            fields: Vec::new(),
        });
        Err(ClientError::Api {
            status: status.as_u16(),
            body,
        })
    }

    fn json<T: DeserializeOwned>(req: RequestBuilder) -> ClientResult<T> {
        let resp = Self::send(req)?;
        let bytes = resp.bytes().map_err(ClientError::Transport)?;
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode(e.to_string()))
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> ClientResult<T> {
        Self::json(self.request(Method::GET, path))
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> ClientResult<T> {
        Self::json(self.request(Method::POST, path).json(body))
    }

    fn post_empty(&self, path: &str) -> ClientResult<()> {
        Self::send(self.request(Method::POST, path)).map(|_| ())
    }

    fn text(&self, path: &str, query: &[(&str, &str)]) -> ClientResult<String> {
        Self::send(self.request(Method::GET, path).query(query))?
            .text()
            .map_err(ClientError::Transport)
    }

    // -------------------------------------------------------------- auth

    pub fn create_account(&self, req: &CreateAccountRequest) -> ClientResult<AccountView> {
        self.post("/api/v1/auth/accounts", req)
    }

    pub fn login(&self, email: &str, password: &str) -> ClientResult<TokenResponse> {
        self.post(
            "/api/v1/auth/login",
            &LoginRequest {
                email: email.to_string(),
                password: password.to_string(),
            },
        )
    }

    pub fn logout(&self) -> ClientResult<()> {
        self.post_empty("/api/v1/auth/logout")
    }

    pub fn whoami(&self) -> ClientResult<WhoAmI> {
        self.get("/api/v1/auth/whoami")
    }

    // ------------------------------------------------------- federations

    pub fn create_federation(&self, name: &str) -> ClientResult<FederationView> {
        self.post(
            "/api/v1/federations",
            &CreateFederationRequest { name: name.to_string() },
        )
    }

    pub fn federations(&self) -> ClientResult<Vec<FederationView>> {
        self.get("/api/v1/federations")
    }

    pub fn federation(&self, federation_id: &str) -> ClientResult<FederationView> {
        self.get(&format!("/api/v1/federations/{federation_id}"))
    }

    pub fn invite(&self, federation_id: &str, email: &str) -> ClientResult<Membership> {
        self.post(
            &format!("/api/v1/federations/{federation_id}/invitations"),
            &InviteRequest { email: email.to_string() },
        )
    }

    pub fn accept(&self, federation_id: &str) -> ClientResult<Membership> {
        Self::json(self.request(Method::POST, &format!("/api/v1/federations/{federation_id}/accept")))
    }

    pub fn remove_member(&self, federation_id: &str, account_id: &str) -> ClientResult<()> {
        Self::send(self.request(
            Method::DELETE,
            &format!("/api/v1/federations/{federation_id}/members/{account_id}"),
        ))
        .map(|_| ())
    }

    pub fn endpoints(&self, federation_id: &str) -> ClientResult<Vec<EndpointRecord>> {
        self.get(&format!("/api/v1/federations/{federation_id}/endpoints"))
    }

    pub fn data_distribution(
        &self,
        federation_id: &str,
        req: &DataDistributionRequest,
    ) -> ClientResult<BTreeMap<String, LabelHistogram>> {
        self.post(&format!("/api/v1/federations/{federation_id}/data-distribution"), req)
    }

    // ------------------------------------------------- endpoints, tasks

    pub fn register_endpoint(
        &self,
        federation_id: &str,
        name: &str,
        device_type: DeviceType,
    ) -> ClientResult<RegisterEndpointResponse> {
        self.post(
            "/api/v1/endpoints",
            &RegisterEndpointRequest {
                federation_id: federation_id.to_string(),
                name: name.to_string(),
                device_type,
            },
        )
    }

    pub fn endpoint(&self, endpoint_id: &str) -> ClientResult<EndpointRecord> {
        self.get(&format!("/api/v1/endpoints/{endpoint_id}"))
    }

    /// Long-polls for up to `max` tasks, waiting at most `wait`.
    pub fn poll_tasks(&self, endpoint_id: &str, wait: Duration, max: usize) -> ClientResult<Vec<TaskEnvelope>> {
        let req = self
            .request(Method::GET, &format!("/api/v1/endpoints/{endpoint_id}/tasks"))
            .query(&[("wait", wait.as_secs_f64().to_string()), ("max", max.to_string())])
            .timeout(wait + POLL_SLACK);
        Self::json(req)
    }

    pub fn heartbeat(&self, endpoint_id: &str, metrics: &ResourceMetrics) -> ClientResult<HeartbeatResponse> {
        self.post(&format!("/api/v1/endpoints/{endpoint_id}/heartbeat"), metrics)
    }

    pub fn submit_result(&self, result: &TaskResult) -> ClientResult<()> {
        Self::send(
            self.request(Method::POST, &format!("/api/v1/tasks/{}/result", result.task_id))
                .json(result),
        )
        .map(|_| ())
    }

    // ------------------------------------------------------------- blobs

    /// Uploads raw bytes. Agent tokens upload into their own federation and
    /// may pass None.
    pub fn put_blob(&self, federation_id: Option<&str>, bytes: Vec<u8>) -> ClientResult<BlobDigest> {
        let mut req = self.request(Method::PUT, "/api/v1/blobs").body(bytes);
        if let Some(f) = federation_id {
            req = req.query(&[("federation_id", f)]);
        }
        Self::json(req)
    }

    pub fn get_blob(&self, digest: &str) -> ClientResult<Vec<u8>> {
        Self::send(self.request(Method::GET, &format!("/api/v1/blobs/{digest}")))?
            .bytes()
            .map(|b| b.to_vec())
            .map_err(ClientError::Transport)
    }

    // ------------------------------------------------------- experiments

    pub fn launch(&self, config: &ExperimentConfig) -> ClientResult<ExperimentRecord> {
        self.post("/api/v1/experiments", config)
    }

    pub fn experiments(&self, federation_id: &str) -> ClientResult<Vec<ExperimentSummary>> {
        Self::json(
            self.request(Method::GET, "/api/v1/experiments")
                .query(&[("federation_id", federation_id)]),
        )
    }

    pub fn experiment(&self, experiment_id: &str) -> ClientResult<ExperimentRecord> {
        self.get(&format!("/api/v1/experiments/{experiment_id}"))
    }

    pub fn logs(&self, experiment_id: &str, from: u64, wait: Duration) -> ClientResult<LogsResponse> {
        Self::json(
            self.request(Method::GET, &format!("/api/v1/experiments/{experiment_id}/logs"))
                .query(&[("from", from.to_string()), ("wait", wait.as_secs_f64().to_string())])
                .timeout(wait + POLL_SLACK),
        )
    }

    pub fn report(&self, experiment_id: &str) -> ClientResult<Report> {
        self.get(&format!("/api/v1/experiments/{experiment_id}/report"))
    }

    pub fn report_csv(&self, experiment_id: &str) -> ClientResult<String> {
        self.text(
            &format!("/api/v1/experiments/{experiment_id}/report"),
            &[("format", "csv")],
        )
    }

    pub fn compare(&self, experiment_ids: &[String]) -> ClientResult<ComparisonReport> {
        Self::json(
            self.request(Method::GET, "/api/v1/experiments/compare")
                .query(&[("ids", experiment_ids.join(","))]),
        )
    }

    pub fn compare_csv(&self, experiment_ids: &[String]) -> ClientResult<String> {
        self.text(
            "/api/v1/experiments/compare",
            &[("ids", &experiment_ids.join(",")), ("format", "csv")],
        )
    }

    pub fn cancel(&self, experiment_id: &str) -> ClientResult<ExperimentRecord> {
        Self::json(self.request(Method::POST, &format!("/api/v1/experiments/{experiment_id}/cancel")))
    }

    /// Raw request for probing routes; returns the status code only.
    pub fn probe(&self, method: &str, path: &str) -> ClientResult<u16> {
        let method = Method::from_bytes(method.as_bytes()).map_err(|e| ClientError::Decode(e.to_string()))?;
        let resp = self
            .request(method, path)
            .header("content-type", "application/json")
            .body("{}")
            .send()
            .map_err(ClientError::Transport)?;
        Ok(resp.status().as_u16())
    }
}

/// True when `status` is a rejection of the caller's credentials.
pub fn is_auth_rejection(status: u16) -> bool {
    status == StatusCode::UNAUTHORIZED.as_u16() || status == StatusCode::FORBIDDEN.as_u16()
}
