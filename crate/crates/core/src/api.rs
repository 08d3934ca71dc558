//! JSON payloads of the REST API, shared by the server, the agent and the CLI.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, FieldError};
use crate::metrics::TrainingMetrics;
use crate::model::{Loss, ModelSpec};
use crate::privacy::PrivacyConfig;

pub type Timestamp = DateTime<Utc>;

// ---------------------------------------------------------------- identity

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateAccountRequest {
    pub display_name: String,
    pub email: String,
    pub password: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoginRequest {
    pub email: String,
    pub password: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountView {
    pub account_id: String,
    pub display_name: String,
    pub email: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenResponse {
    pub token: String,
    pub account_id: String,
    pub expires_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Member,
    Admin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MembershipStatus {
    Invited,
    Active,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Membership {
    pub account_id: String,
    pub role: Role,
    pub status: MembershipStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub email: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FederationView {
    pub federation_id: String,
    pub name: String,
    pub admin_id: String,
    pub members: Vec<Membership>,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateFederationRequest {
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InviteRequest {
    pub email: String,
}

/// The caller's account, federations, and pending invitations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WhoAmI {
    pub account: AccountView,
    pub federations: Vec<FederationView>,
    pub invitations: Vec<FederationView>,
}

// ---------------------------------------------------------------- dispatch

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceType {
    Cpu,
    Gpu,
}

impl std::str::FromStr for DeviceType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cpu" => Ok(DeviceType::Cpu),
            "gpu" => Ok(DeviceType::Gpu),
            _ => Err(format!("unknown device type {s:?} (expected cpu or gpu)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointStatus {
    Online,
    Offline,
    Busy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceMetrics {
    pub cpu_percent: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_percent: Option<f64>,
    pub mem_used_bytes: u64,
    pub mem_total_bytes: u64,
    pub net_tx_bytes_per_s: f64,
    pub net_rx_bytes_per_s: f64,
    pub sampled_at: Timestamp,
}

impl ResourceMetrics {
    pub fn validate(&self) -> Result<(), String> {
        let pct = |x: f64| x.is_finite() && (0.0..=100.0).contains(&x);
        if !pct(self.cpu_percent) {
            return Err(format!("cpu_percent {} outside [0, 100]", self.cpu_percent));
        }
        if let Some(g) = self.gpu_percent {
            if !pct(g) {
                return Err(format!("gpu_percent {g} outside [0, 100]"));
            }
        }
        if self.mem_used_bytes > self.mem_total_bytes {
            return Err("mem_used_bytes exceeds mem_total_bytes".into());
        }
        for (name, v) in [
            ("net_tx_bytes_per_s", self.net_tx_bytes_per_s),
            ("net_rx_bytes_per_s", self.net_rx_bytes_per_s),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointRecord {
    pub endpoint_id: String,
    pub federation_id: String,
    pub owner_account_id: String,
    pub name: String,
    pub device_type: DeviceType,
    pub status: EndpointStatus,
    #[serde(default)]
    pub last_heartbeat: Option<Timestamp>,
    #[serde(default)]
    pub resources: Option<ResourceMetrics>,
    pub registered_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterEndpointRequest {
    pub federation_id: String,
    pub name: String,
    pub device_type: DeviceType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterEndpointResponse {
    pub endpoint: EndpointRecord,
    /// Shown once; the server keeps only a hash.
    pub agent_token: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlobDigest {
    pub sha256: String,
    pub size_bytes: u64,
}

impl BlobDigest {
    pub fn is_well_formed(digest: &str) -> bool {
        digest.len() == 64 && digest.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Train,
    Evaluate,
    DataHistogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEnvelope {
    pub task_id: String,
    pub experiment_id: String,
    /// Global round whose model the task carries.
    pub round: u64,
    pub kind: TaskKind,
    pub config_payload: serde_json::Value,
    #[serde(default)]
    pub model_blob: Option<BlobDigest>,
    pub deadline: Timestamp,
}

/// Typed view of `TaskEnvelope::config_payload`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPayload {
    pub model_spec: ModelSpec,
    #[serde(default)]
    pub loss: Loss,
    #[serde(default)]
    pub epochs: u64,
    #[serde(default)]
    pub batch_size: u64,
    #[serde(default)]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub privacy: PrivacyConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub status: TaskStatus,
    #[serde(default)]
    pub result_blob: Option<BlobDigest>,
    #[serde(default)]
    pub metrics: TrainingMetrics,
    /// Rows behind the metrics (train rows for training, validation rows for
    /// evaluation); the weight of this client in aggregation.
    #[serde(default)]
    pub sample_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<Vec<u64>>,
    /// L2 norm of the update after clipping, before noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp_clipped_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
    pub wall_seconds: f64,
}

impl TaskResult {
    pub fn failure(task_id: impl Into<String>, message: impl Into<String>, wall_seconds: f64) -> Self {
        Self {
            task_id: task_id.into(),
            status: TaskStatus::Failure,
            result_blob: None,
            metrics: TrainingMetrics::default(),
            sample_count: 0,
            histogram: None,
            dp_clipped_norm: None,
            error_message: Some(message.into()),
            wall_seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeartbeatResponse {
    pub status: EndpointStatus,
    /// Interval the server expects between heartbeats.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval_s: Option<f64>,
}

// ------------------------------------------------------------- experiments

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentStatus {
    Created,
    Running,
    Finished,
    Failed,
    Cancelled,
}

impl ExperimentStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            ExperimentStatus::Finished | ExperimentStatus::Failed | ExperimentStatus::Cancelled
        )
    }

    pub fn can_transition_to(self, next: ExperimentStatus) -> bool {
        use ExperimentStatus::*;
        matches!(
            (self, next),
            (Created, Running) | (Created, Failed) | (Created, Cancelled) | (Running, Finished)
                | (Running, Failed)
                | (Running, Cancelled)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientRoundStatus {
    Success,
    Failure,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundEntry {
    pub status: ClientRoundStatus,
    #[serde(default)]
    pub metrics: Option<TrainingMetrics>,
    #[serde(default)]
    pub wall_seconds: Option<f64>,
    #[serde(default)]
    pub sample_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_samples: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp_clipped_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub staleness: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub per_client: BTreeMap<String, ClientRoundEntry>,
    #[serde(default)]
    pub global_val_accuracy: Option<f64>,
    #[serde(default)]
    pub global_val_loss: Option<f64>,
    pub started_at: Timestamp,
    #[serde(default)]
    pub finished_at: Option<Timestamp>,
    pub client_lr_used: f64,
    #[serde(default)]
    pub global_model: Option<BlobDigest>,
    /// FedAsync mixing weight `α_s` applied in this aggregation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixing_weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogLine {
    pub line: u64,
    pub at: Timestamp,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelHistogram {
    pub counts: Vec<u64>,
    /// Set when the client reported no training rows.
    #[serde(default)]
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config: ExperimentConfig,
    pub status: ExperimentStatus,
    pub rounds: Vec<RoundRecord>,
    #[serde(default)]
    pub log: Vec<LogLine>,
    #[serde(default)]
    pub final_model: Option<BlobDigest>,
    #[serde(default)]
    pub data_histograms: BTreeMap<String, LabelHistogram>,
    pub created_at: Timestamp,
    #[serde(default)]
    pub failure: Option<String>,
}

/// Lightweight listing entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub experiment_id: String,
    pub federation_id: String,
    pub name: String,
    pub algorithm: crate::aggregation::Algorithm,
    pub status: ExperimentStatus,
    pub rounds_completed: u64,
    pub rounds: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogsResponse {
    pub lines: Vec<LogLine>,
    pub next_line: u64,
    pub status: ExperimentStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDistributionRequest {
    pub roster: Vec<String>,
    #[serde(default)]
    pub model_spec: Option<ModelSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReportCell {
    #[serde(default)]
    pub val_accuracy: Option<f64>,
    #[serde(default)]
    pub wall_seconds: Option<f64>,
    #[serde(default)]
    pub train_loss: Option<f64>,
    pub status: ClientRoundStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub round: u64,
    pub global_val_accuracy: Option<f64>,
    pub global_val_loss: Option<f64>,
    pub client_lr_used: f64,
    pub clients: BTreeMap<String, ClientReportCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySummary {
    pub mechanism: crate::privacy::Mechanism,
    #[serde(default)]
    pub epsilon_per_round: Option<f64>,
    /// `rounds · epsilon` under basic composition.
    #[serde(default)]
    pub composed_epsilon: Option<f64>,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment_id: String,
    pub status: ExperimentStatus,
    pub config: ExperimentConfig,
    pub rows: Vec<ReportRow>,
    pub final_model: Option<BlobDigest>,
    pub privacy: PrivacySummary,
    pub data_histograms: BTreeMap<String, LabelHistogram>,
}

impl Report {
    /// One line per round: round, global accuracy, global loss, lr, then
    /// accuracy and wall time per client in roster order.
    pub fn to_csv(&self) -> String {
        let roster = &self.config.roster;
        let mut out = String::from("round,global_val_accuracy,global_val_loss,client_lr_used");
        for id in roster {
            out.push_str(&format!(",{id}_val_accuracy,{id}_wall_seconds"));
        }
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}",
                row.round,
                opt(row.global_val_accuracy),
                opt(row.global_val_loss),
                row.client_lr_used
            ));
            for id in roster {
                let cell = row.clients.get(id);
                out.push_str(&format!(
                    ",{},{}",
                    opt(cell.and_then(|c| c.val_accuracy)),
                    opt(cell.and_then(|c| c.wall_seconds))
                ));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySeries {
    pub experiment_id: String,
    pub name: String,
    pub algorithm: crate::aggregation::Algorithm,
    /// Global validation accuracy per round, index 0 is round 1.
    pub accuracy: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rounds: u64,
    pub series: Vec<AccuracySeries>,
}

impl ComparisonReport {
    /// `round,<id1>,<id2>,...` with one row per round.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round");
        for s in &self.series {
            out.push(',');
            out.push_str(&s.experiment_id);
        }
        out.push('\n');
        for r in 0..self.rounds as usize {
            out.push_str(&(r + 1).to_string());
            for s in &self.series {
                out.push(',');
                if let Some(Some(a)) = s.accuracy.get(r) {
                    out.push_str(&a.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

// ------------------------------------------------------------------ errors

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}
