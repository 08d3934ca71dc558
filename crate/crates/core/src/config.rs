use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregatorHyper, Algorithm};
use crate::model::{Loss, ModelSpec};
use crate::privacy::PrivacyConfig;

fn default_decay() -> f64 {
    1.0
}
fn default_quorum() -> f64 {
    1.0
}
fn default_round_timeout() -> f64 {
    600.0
}

/// Everything needed to run one experiment. Accepted as JSON by the API and
/// as a file by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Assigned by the server when left empty.
    #[serde(default)]
    pub experiment_id: String,
    pub federation_id: String,
    pub name: String,
    pub algorithm: Algorithm,
    pub model_spec: ModelSpec,
    #[serde(default)]
    pub loss: Loss,
    pub rounds: u64,
    pub local_epochs: u64,
    pub batch_size: u64,
    pub client_lr: f64,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub aggregator_hyper: AggregatorHyper,
    #[serde(default)]
    pub privacy: PrivacyConfig,
    pub roster: Vec<String>,
    #[serde(default = "default_quorum")]
    pub quorum_fraction: f64,
    #[serde(default = "default_round_timeout")]
    pub round_timeout_s: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl ExperimentConfig {
    /// Client learning rate for a 1-based round: `client_lr · lr_decay^(round−1)`.
    pub fn client_lr_for_round(&self, round: u64) -> f64 {
        self.client_lr * self.lr_decay.powi(round.saturating_sub(1) as i32)
    }

    /// Number of roster results a synchronous round needs.
    pub fn quorum_size(&self) -> usize {
        let n = self.roster.len();
        ((self.quorum_fraction * n as f64).ceil() as usize).clamp(1, n.max(1))
    }

    /// Structural checks that need no server state.
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors = Vec::new();
        let mut push = |f: &str, m: &str| errors.push(FieldError::new(f, m));
        if self.federation_id.trim().is_empty() {
            push("federation_id", "must not be empty");
        }
        if self.name.trim().is_empty() {
            push("name", "must not be empty");
        }
        if self.rounds == 0 {
            push("rounds", "must be at least 1");
        }
        if self.local_epochs == 0 {
            push("local_epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            push("batch_size", "must be at least 1");
        }
        if !(self.client_lr.is_finite() && self.client_lr > 0.0) {
            push("client_lr", "must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            push("lr_decay", "must be in (0, 1]");
        }
        if !(self.quorum_fraction > 0.0 && self.quorum_fraction <= 1.0) {
            push("quorum_fraction", "must be in (0, 1]");
        }
        if !(self.round_timeout_s.is_finite() && self.round_timeout_s > 0.0) {
            push("round_timeout_s", "must be positive");
        }
        if self.roster.is_empty() {
            push("roster", "must name at least one endpoint");
        }
        let mut seen = std::collections::HashSet::new();
        if self.roster.iter().any(|e| !seen.insert(e)) {
            push("roster", "endpoints must be unique");
        }
        if let Err(e) = self.model_spec.network() {
            push("model_spec", &e.to_string());
        }
        if let Err(e) = self.privacy.validate() {
            push("privacy", &e.to_string());
        }
        for (field, message) in self.aggregator_hyper.violations() {
            errors.push(FieldError::new(format!("aggregator_hyper.{field}"), message));
        }
        errors
    }

    /// The configuration of the MNIST use case: five clients, FedAvg, ten
    /// rounds of two local epochs at batch 64, lr 0.01 decayed by 0.975.
    pub fn template(federation_id: &str, roster: Vec<String>) -> Self {
        Self {
            experiment_id: String::new(),
            federation_id: federation_id.to_string(),
            name: "mnist-fedavg".to_string(),
            algorithm: Algorithm::FedAvg,
            model_spec: ModelSpec::mlp(784, &[64], 10).with_seed(42),
            loss: Loss::CrossEntropy,
            rounds: 10,
            local_epochs: 2,
            batch_size: 64,
            client_lr: 0.01,
            lr_decay: 0.975,
            aggregator_hyper: AggregatorHyper::default(),
            privacy: PrivacyConfig::none(),
            roster,
            quorum_fraction: 1.0,
            round_timeout_s: 600.0,
            seed: 7,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig::template("fed", (1..=5).map(|i| format!("ep{i}")).collect())
    }

    #[test]
    fn template_is_valid() {
        assert!(cfg().validate().is_empty());
    }

    #[test]
    fn lr_schedule() {
        let c = cfg();
        assert_eq!(c.client_lr_for_round(1), 0.01);
        assert!((c.client_lr_for_round(2) - 0.00975).abs() < 1e-15);
    }

    #[test]
    fn zero_quorum_is_invalid() {
        let mut c = cfg();
        c.quorum_fraction = 0.0;
        let errs = c.validate();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].field, "quorum_fraction");
    }

    #[test]
    fn quorum_size_rounds_up() {
        let mut c = cfg();
        assert_eq!(c.quorum_size(), 5);
        c.quorum_fraction = 0.5;
        assert_eq!(c.quorum_size(), 3);
        c.quorum_fraction = 0.01;
        assert_eq!(c.quorum_size(), 1);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = serde_json::to_value(cfg()).unwrap();
        v["roundz"] = serde_json::json!(3);
        let err = serde_json::from_value::<ExperimentConfig>(v).unwrap_err();
        assert!(err.to_string().contains("roundz"));
    }

    #[test]
    fn defaults_fill_optional_fields() {
        let v = serde_json::json!({
            "federation_id": "f", "name": "n", "algorithm": "FedAvgM",
            "model_spec": {"kind": "logistic_regression", "input_shape": [4], "num_classes": 3},
            "rounds": 2, "local_epochs": 1, "batch_size": 8, "client_lr": 0.1,
            "roster": ["a"]
        });
        let c: ExperimentConfig = serde_json::from_value(v).unwrap();
        assert_eq!(c.quorum_fraction, 1.0);
        assert_eq!(c.lr_decay, 1.0);
        assert_eq!(c.aggregator_hyper.server_momentum, 0.9);
        assert!(c.validate().is_empty());
    }
}
