//! Runs one task against the local dataset. No network access: the runner
//! fetches the model beforehand and uploads the result afterwards.

use std::time::{Duration, Instant};

use fedsilo_core::api::{TaskEnvelope, TaskKind, TaskPayload, TaskResult, TaskStatus};
use fedsilo_core::privacy::apply_dp;
use fedsilo_core::{
    evaluate, local_train, Dataset, Mechanism, ParameterVector, PrivacyConfig, Split, TrainOptions,
    TrainingMetrics,
};

/// What a task produced: the result to report and, for training, the
/// weights to upload before reporting.
#[derive(Debug, Clone)]
pub struct Execution {
    pub result: TaskResult,
    pub upload: Option<ParameterVector>,
}

pub struct Executor {
    data: Dataset,
    local_privacy: Option<PrivacyConfig>,
    throttle: Duration,
}

fn success(task_id: &str) -> TaskResult {
    TaskResult {
        task_id: task_id.to_string(),
        status: TaskStatus::Success,
        result_blob: None,
        metrics: TrainingMetrics::default(),
        sample_count: 0,
        histogram: None,
        dp_clipped_norm: None,
        error_message: None,
        wall_seconds: 0.0,
    }
}

impl Executor {
    pub fn new(data: Dataset, local_privacy: Option<PrivacyConfig>, throttle: Duration) -> Self {
        Self {
            data,
            local_privacy,
            throttle,
        }
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    /// Runs `task`. Failures become failure results rather than errors, so
    /// the orchestrator always hears back.
    pub fn execute(&self, task: &TaskEnvelope, model: Option<ParameterVector>) -> Execution {
        let started = Instant::now();
        let outcome = match task.kind {
            TaskKind::Train => self.train(task, model),
            TaskKind::Evaluate => self.evaluate(task, model),
            TaskKind::DataHistogram => Ok(self.histogram(task)),
        };
        let wall_seconds = started.elapsed().as_secs_f64();
        match outcome {
            Ok(mut execution) => {
                execution.result.wall_seconds = wall_seconds;
                execution
            }
            Err(message) => Execution {
                result: TaskResult::failure(&task.task_id, message, wall_seconds),
                upload: None,
            },
        }
    }

    fn payload(task: &TaskEnvelope) -> Result<TaskPayload, String> {
        serde_json::from_value(task.config_payload.clone()).map_err(|e| format!("bad task payload: {e}"))
    }

    fn train(&self, task: &TaskEnvelope, model: Option<ParameterVector>) -> Result<Execution, String> {
        let payload = Self::payload(task)?;
        let global = model.ok_or("train task without a model")?;
        let opts = TrainOptions {
            epochs: payload.epochs as usize,
            batch_size: payload.batch_size as usize,
            lr: payload.lr,
            seed: payload.seed,
            loss: payload.loss,
        };
        let trained = local_train(&global, &payload.model_spec, &self.data, &opts).map_err(|e| e.to_string())?;
        if !self.throttle.is_zero() {
            std::thread::sleep(self.throttle);
        }
        let privacy = payload.privacy.strictest(self.local_privacy);
        let (weights, dp_clipped_norm) = if privacy.mechanism == Mechanism::None {
            (trained.weights, None)
        } else {
            let delta = trained.weights.sub(&global).map_err(|e| e.to_string())?;
            let perturbed = apply_dp(&delta, &privacy).map_err(|e| e.to_string())?;
            let weights = global.add(&perturbed.delta).map_err(|e| e.to_string())?;
            (weights, Some(perturbed.clipped_norm))
        };
        let mut result = success(&task.task_id);
        result.metrics = trained.metrics;
        result.sample_count = trained.samples;
        result.dp_clipped_norm = dp_clipped_norm;
        Ok(Execution {
            result,
            upload: Some(weights),
        })
    }

    fn evaluate(&self, task: &TaskEnvelope, model: Option<ParameterVector>) -> Result<Execution, String> {
        let payload = Self::payload(task)?;
        let model = model.ok_or("evaluate task without a model")?;
        let eval = evaluate(&model, &payload.model_spec, &self.data, Split::Val, payload.loss)
            .map_err(|e| e.to_string())?;
        let mut result = success(&task.task_id);
        result.metrics = eval.metrics;
        result.sample_count = eval.samples;
        Ok(Execution { result, upload: None })
    }

    fn histogram(&self, task: &TaskEnvelope) -> Execution {
        let mut counts = self.data.label_histogram();
        let wanted = task
            .config_payload
            .get("num_classes")
            .and_then(|v| v.as_u64())
            .unwrap_or(0) as usize;
        if counts.len() < wanted {
            counts.resize(wanted, 0);
        }
        let mut result = success(&task.task_id);
        result.sample_count = counts.iter().sum();
        result.histogram = Some(counts);
        Execution { result, upload: None }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedsilo_core::api::TaskPayload;
    use fedsilo_core::{Loss, ModelSpec};

    fn dataset() -> Dataset {
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let features: Vec<f64> = labels
            .iter()
            .flat_map(|&l| (0..4).map(move |j| if j == l { 1.0 } else { 0.1 * j as f64 }))
            .collect();
        Dataset::new(features, 4, labels, 3, 0.2, 1).unwrap()
    }

    fn envelope(kind: TaskKind, privacy: PrivacyConfig) -> TaskEnvelope {
        let payload = TaskPayload {
            model_spec: ModelSpec::logistic(4, 3).with_seed(1),
            loss: Loss::CrossEntropy,
            epochs: 2,
            batch_size: 8,
            lr: 0.1,
            seed: 5,
            privacy,
        };
        TaskEnvelope {
            task_id: "t".into(),
            experiment_id: "e".into(),
            round: 0,
            kind,
            config_payload: serde_json::to_value(payload).unwrap(),
            model_blob: None,
            deadline: chrono::Utc::now(),
        }
    }

    fn model() -> ParameterVector {
        ModelSpec::logistic(4, 3).with_seed(1).init().unwrap()
    }

    #[test]
    fn train_is_deterministic_without_dp() {
        let ex = Executor::new(dataset(), None, Duration::ZERO);
        let task = envelope(TaskKind::Train, PrivacyConfig::none());
        let a = ex.execute(&task, Some(model()));
        let b = ex.execute(&task, Some(model()));
        assert_eq!(a.result.status, TaskStatus::Success);
        assert_eq!(a.result.sample_count, 48);
        assert_eq!(a.upload, b.upload);
        assert!(a.result.dp_clipped_norm.is_none());
    }

    #[test]
    fn local_floor_applies_dp() {
        let floor = PrivacyConfig::laplace(1.0, 0.01).with_seed(3);
        let ex = Executor::new(dataset(), Some(floor), Duration::ZERO);
        let out = ex.execute(&envelope(TaskKind::Train, PrivacyConfig::none()), Some(model()));
        let norm = out.result.dp_clipped_norm.unwrap();
        assert!(norm <= 0.01 * (1.0 + 1e-12));
    }

    #[test]
    fn evaluate_uses_validation_rows() {
        let ex = Executor::new(dataset(), None, Duration::ZERO);
        let out = ex.execute(&envelope(TaskKind::Evaluate, PrivacyConfig::none()), Some(model()));
        assert_eq!(out.result.sample_count, 12);
        assert!(out.upload.is_none());
    }

    #[test]
    fn missing_model_is_a_failure_result() {
        let ex = Executor::new(dataset(), None, Duration::ZERO);
        let out = ex.execute(&envelope(TaskKind::Train, PrivacyConfig::none()), None);
        assert_eq!(out.result.status, TaskStatus::Failure);
        assert!(out.result.error_message.unwrap().contains("without a model"));
    }

    #[test]
    fn histogram_counts_all_rows_and_pads() {
        let ex = Executor::new(dataset(), None, Duration::ZERO);
        let mut task = envelope(TaskKind::DataHistogram, PrivacyConfig::none());
        task.config_payload = serde_json::json!({"num_classes": 5});
        let out = ex.execute(&task, None);
        assert_eq!(out.result.histogram.unwrap(), vec![20, 20, 20, 0, 0]);
    }
}
