//! Experiment life cycle: launch, the synchronous and asynchronous round
//! loops, global evaluation, logs and reports.
//!
//! Each running experiment has one supervisor task that owns its aggregator
//! state. API reads take snapshots of the record under a short lock.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration as StdDuration;

use chrono::Duration;
use fedsilo_core::aggregation::{self, staleness_weight, AggregatorState, ClientUpdate};
use fedsilo_core::api::{
    AccuracySeries, BlobDigest, ClientReportCell, ClientRoundEntry, ClientRoundStatus, ComparisonReport,
    ExperimentRecord, ExperimentStatus, ExperimentSummary, LabelHistogram, LogLine, LogsResponse,
    PrivacySummary, Report, ReportRow, RoundRecord, TaskEnvelope, TaskKind, TaskPayload, TaskResult,
    TaskStatus, Timestamp,
};
use fedsilo_core::params::{deserialize, serialize};
use fedsilo_core::privacy::Mechanism;
use fedsilo_core::{Algorithm, ExperimentConfig, FieldError, ParameterVector, TrainingMetrics};
use tokio::sync::{mpsc, watch, Notify};
use tokio::time::Instant;

use crate::blobs::BlobStore;
use crate::clock::Clock;
use crate::dispatch::{Dispatch, TaskEvent};
use crate::error::{ApiError, ApiResult};
use crate::store::Store;

const KIND: &str = "experiments";
const MIN_TASK_TIMEOUT_S: f64 = 60.0;
const MAX_LOG_WAIT_S: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct OrchestratorSettings {
    /// How long launch waits for label histograms before going on without.
    pub histogram_timeout: StdDuration,
    /// Upper bound on waiting for evaluation results after an aggregation.
    pub eval_timeout: StdDuration,
}

impl Default for OrchestratorSettings {
    fn default() -> Self {
        Self {
            histogram_timeout: StdDuration::from_secs(30),
            eval_timeout: StdDuration::from_secs(120),
        }
    }
}

pub struct Experiment {
    pub id: String,
    pub federation_id: String,
    record: Mutex<ExperimentRecord>,
    changed: Notify,
    cancel: watch::Sender<bool>,
}

impl Experiment {
    pub fn snapshot(&self) -> ExperimentRecord {
        self.record.lock().unwrap().clone()
    }

    pub fn status(&self) -> ExperimentStatus {
        self.record.lock().unwrap().status
    }

    async fn cancelled(&self) {
        let mut rx = self.cancel.subscribe();
        let _ = rx.wait_for(|c| *c).await;
    }
}

/// Why a supervisor stopped early.
enum Stop {
    Failed(String),
    Cancelled,
}

impl From<ApiError> for Stop {
    fn from(e: ApiError) -> Self {
        Stop::Failed(e.to_string())
    }
}

pub struct Orchestrator {
    store: Store,
    clock: Arc<dyn Clock>,
    dispatch: Arc<Dispatch>,
    blobs: Arc<BlobStore>,
    settings: OrchestratorSettings,
    experiments: RwLock<HashMap<String, Arc<Experiment>>>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one client's task, fixed by experiment seed, round and roster
/// position so repeated runs see identical batch orders.
pub fn task_seed(seed: u64, round: u64, roster_index: usize) -> u64 {
    splitmix(splitmix(seed ^ round.rotate_left(32)) ^ roster_index as u64)
}

fn valid_id(id: &str) -> bool {
    (1..=64).contains(&id.len())
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Events for one experiment, with ones not yet wanted kept aside.
struct Inbox {
    rx: mpsc::UnboundedReceiver<TaskEvent>,
    stash: VecDeque<TaskEvent>,
}

impl Inbox {
    /// The next event for one of `ids`, or None once `deadline` passes.
    async fn next_for(&mut self, ids: &HashMap<String, usize>, deadline: Instant) -> Option<TaskEvent> {
        if let Some(pos) = self
            .stash
            .iter()
            .position(|e| ids.contains_key(&e.task().task_id))
        {
            return self.stash.remove(pos);
        }
        loop {
            match tokio::time::timeout_at(deadline, self.rx.recv()).await {
                Ok(Some(event)) if ids.contains_key(&event.task().task_id) => return Some(event),
                Ok(Some(event)) => self.stash.push_back(event),
                Ok(None) | Err(_) => return None,
            }
        }
    }
}

/// One client's contribution to an aggregation.
struct Returned {
    roster_index: usize,
    weights: ParameterVector,
    sample_count: u64,
    metrics: TrainingMetrics,
    base_round: u64,
}

impl Orchestrator {
    /// Loads stored experiments. Any that were still running when the
    /// previous process stopped are marked failed; their completed rounds
    /// are kept as they were.
    pub fn open(
        store: Store,
        clock: Arc<dyn Clock>,
        dispatch: Arc<Dispatch>,
        blobs: Arc<BlobStore>,
        settings: OrchestratorSettings,
    ) -> ApiResult<Arc<Self>> {
        let orch = Arc::new(Self {
            store,
            clock,
            dispatch,
            blobs,
            settings,
            experiments: RwLock::new(HashMap::new()),
        });
        for mut record in orch.store.list::<ExperimentRecord>(KIND)? {
            let id = record.config.experiment_id.clone();
            record.log = orch.store.read_log(&id)?;
            let interrupted = !record.status.is_terminal();
            let exp = Arc::new(Experiment {
                id: id.clone(),
                federation_id: record.config.federation_id.clone(),
                record: Mutex::new(record),
                changed: Notify::new(),
                cancel: watch::channel(false).0,
            });
            orch.experiments.write().unwrap().insert(id, exp.clone());
            if interrupted {
                let k = exp.record.lock().unwrap().rounds.len();
                let reason = format!(
                    "server restarted during the experiment; rounds 1..{k} are kept, the run is not resumed"
                );
                orch.log(&exp, reason.to_string());
                orch.finish(&exp, ExperimentStatus::Failed, Some(reason), None)?;
            }
        }
        Ok(orch)
    }

    pub fn get(&self, experiment_id: &str) -> ApiResult<Arc<Experiment>> {
        self.experiments
            .read()
            .unwrap()
            .get(experiment_id)
            .cloned()
            .ok_or_else(|| ApiError::NoSuchExperiment(experiment_id.to_string()))
    }

    pub fn list(&self, federation_id: &str) -> Vec<ExperimentSummary> {
        let exps: Vec<Arc<Experiment>> = self
            .experiments
            .read()
            .unwrap()
            .values()
            .filter(|e| e.federation_id == federation_id)
            .cloned()
            .collect();
        let mut out: Vec<(Timestamp, ExperimentSummary)> = exps
            .iter()
            .map(|e| {
                let r = e.record.lock().unwrap();
                (
                    r.created_at,
                    ExperimentSummary {
                        experiment_id: e.id.clone(),
                        federation_id: e.federation_id.clone(),
                        name: r.config.name.clone(),
                        algorithm: r.config.algorithm,
                        status: r.status,
                        rounds_completed: r.rounds.len() as u64,
                        rounds: r.config.rounds,
                    },
                )
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.experiment_id.cmp(&b.1.experiment_id)));
        out.into_iter().map(|(_, s)| s).collect()
    }

    fn persist(&self, record: &ExperimentRecord) -> ApiResult<()> {
        let stored = ExperimentRecord {
            log: Vec::new(),
            ..record.clone()
        };
        self.store.put(KIND, &record.config.experiment_id, &stored)?;
        Ok(())
    }

    fn log(&self, exp: &Experiment, text: impl Into<String>) {
        let text = text.into();
        tracing::info!(experiment = %exp.id, "{text}");
        let mut record = exp.record.lock().unwrap();
        let now = self.clock.now();
        let at = record.log.last().map_or(now, |l| l.at.max(now));
        let line = LogLine {
            line: record.log.len() as u64,
            at,
            text,
        };
        if let Err(e) = self.store.append_log(&exp.id, &line) {
            tracing::error!(experiment = %exp.id, error = %e, "cannot persist log line");
        }
        record.log.push(line);
        drop(record);
        exp.changed.notify_waiters();
    }

    fn update(&self, exp: &Experiment, f: impl FnOnce(&mut ExperimentRecord)) -> ApiResult<()> {
        let mut record = exp.record.lock().unwrap();
        f(&mut record);
        self.persist(&record)?;
        drop(record);
        exp.changed.notify_waiters();
        Ok(())
    }

    /// Moves a non-terminal experiment to `status`. Returns false when the
    /// experiment had already ended (for example, cancelled meanwhile).
    fn finish(
        &self,
        exp: &Experiment,
        status: ExperimentStatus,
        failure: Option<String>,
        final_model: Option<BlobDigest>,
    ) -> ApiResult<bool> {
        let mut changed = false;
        self.update(exp, |r| {
            if r.status.can_transition_to(status) {
                r.status = status;
                r.failure = failure;
                if final_model.is_some() {
                    r.final_model = final_model;
                }
                changed = true;
            }
        })?;
        Ok(changed)
    }

    /// Checks a launch request against server state: roster endpoints must
    /// exist in the federation and be online.
    pub fn validate_launch(&self, config: &ExperimentConfig) -> ApiResult<()> {
        let mut errors = config.validate();
        if !config.experiment_id.is_empty() {
            if !valid_id(&config.experiment_id) {
                errors.push(FieldError::new(
                    "experiment_id",
                    "use 1-64 characters from [A-Za-z0-9_-]",
                ));
            } else if self.experiments.read().unwrap().contains_key(&config.experiment_id) {
                errors.push(FieldError::new("experiment_id", "already exists"));
            }
        }
        let mut offline = Vec::new();
        for endpoint_id in &config.roster {
            match self.dispatch.endpoint(endpoint_id) {
                Ok(e) if e.federation_id == config.federation_id => {
                    if !self.dispatch.is_reachable(endpoint_id) {
                        offline.push(format!("{} ({})", e.name, e.endpoint_id));
                    }
                }
                _ => errors.push(FieldError::new(
                    "roster",
                    format!("endpoint {endpoint_id} is not registered in this federation"),
                )),
            }
        }
        if !errors.is_empty() {
            return Err(ApiError::InvalidConfig(errors));
        }
        if !offline.is_empty() {
            return Err(ApiError::EndpointOffline(offline));
        }
        Ok(())
    }

    /// Validates, initializes the global model from the spec's seed, stores
    /// the record as running and starts its supervisor.
    pub fn launch(self: &Arc<Self>, mut config: ExperimentConfig) -> ApiResult<ExperimentRecord> {
        self.validate_launch(&config)?;
        if config.experiment_id.is_empty() {
            config.experiment_id = uuid::Uuid::new_v4().to_string();
        }
        let global = config
            .model_spec
            .init::<f64>()
            .map_err(|e| ApiError::InvalidConfig(vec![FieldError::new("model_spec", e.to_string())]))?;
        let record = ExperimentRecord {
            config: config.clone(),
            status: ExperimentStatus::Running,
            rounds: Vec::new(),
            log: Vec::new(),
            final_model: None,
            data_histograms: BTreeMap::new(),
            created_at: self.clock.now(),
            failure: None,
        };
        let exp = Arc::new(Experiment {
            id: config.experiment_id.clone(),
            federation_id: config.federation_id.clone(),
            record: Mutex::new(record),
            changed: Notify::new(),
            cancel: watch::channel(false).0,
        });
        {
            let mut all = self.experiments.write().unwrap();
            if all.contains_key(&exp.id) {
                return Err(ApiError::InvalidConfig(vec![FieldError::new(
                    "experiment_id",
                    "already exists",
                )]));
            }
            self.persist(&exp.snapshot())?;
            all.insert(exp.id.clone(), exp.clone());
        }
        self.log(
            &exp,
            format!(
                "launched {} ({}): {} rounds, {} local epochs, batch {}, lr {} decay {}, {} clients, {} parameters",
                config.name,
                config.algorithm,
                config.rounds,
                config.local_epochs,
                config.batch_size,
                config.client_lr,
                config.lr_decay,
                config.roster.len(),
                global.len()
            ),
        );
        let events = self.dispatch.subscribe(&exp.id);
        let snapshot = exp.snapshot();
        tokio::spawn(self.clone().supervise(exp, global, events));
        Ok(snapshot)
    }

    pub fn cancel(&self, experiment_id: &str) -> ApiResult<ExperimentRecord> {
        let exp = self.get(experiment_id)?;
        if !self.finish(&exp, ExperimentStatus::Cancelled, None, None)? {
            return Err(ApiError::Conflict(format!(
                "experiment {experiment_id} has already ended"
            )));
        }
        let drained = self.dispatch.cancel_where(|t, _| t.experiment_id == exp.id);
        self.log(&exp, format!("cancelled; {drained} pending tasks withdrawn"));
        exp.cancel.send_replace(true);
        Ok(exp.snapshot())
    }

    async fn supervise(
        self: Arc<Self>,
        exp: Arc<Experiment>,
        global: ParameterVector,
        events: mpsc::UnboundedReceiver<TaskEvent>,
    ) {
        let mut inbox = Inbox {
            rx: events,
            stash: VecDeque::new(),
        };
        let run = async {
            self.collect_histograms(&exp, &mut inbox).await;
            let config = exp.snapshot().config;
            if config.algorithm.is_async() {
                self.run_async(&exp, &mut inbox, global).await
            } else {
                self.run_sync(&exp, &mut inbox, global).await
            }
        };
        let outcome = tokio::select! {
            r = run => r,
            _ = exp.cancelled() => Err(Stop::Cancelled),
        };
        let result = match outcome {
            Ok(final_model) => {
                let rounds = exp.record.lock().unwrap().rounds.len();
                self.finish(&exp, ExperimentStatus::Finished, None, Some(final_model.clone()))
                    .map(|changed| {
                        if changed {
                            self.log(
                                &exp,
                                format!("finished after {rounds} rounds; final model {}", final_model.sha256),
                            );
                        }
                    })
            }
            Err(Stop::Failed(reason)) => {
                self.log(&exp, format!("failed: {reason}"));
                self.finish(&exp, ExperimentStatus::Failed, Some(reason), None).map(|_| ())
            }
            Err(Stop::Cancelled) => Ok(()),
        };
        if let Err(e) = result {
            tracing::error!(experiment = %exp.id, error = %e, "cannot record experiment outcome");
        }
        self.dispatch.cancel_where(|t, _| t.experiment_id == exp.id);
        self.dispatch.unsubscribe(&exp.id);
    }

    fn envelope(
        &self,
        exp: &Experiment,
        kind: TaskKind,
        base_round: u64,
        payload: serde_json::Value,
        model_blob: Option<BlobDigest>,
        timeout_s: f64,
    ) -> TaskEnvelope {
        TaskEnvelope {
            task_id: uuid::Uuid::new_v4().to_string(),
            experiment_id: exp.id.clone(),
            round: base_round,
            kind,
            config_payload: payload,
            model_blob,
            deadline: self.clock.now() + Duration::milliseconds((timeout_s * 1000.0) as i64),
        }
    }

    fn train_payload(config: &ExperimentConfig, round: u64, roster_index: usize) -> serde_json::Value {
        let mut privacy = config.privacy;
        if let Some(seed) = privacy.noise_seed {
            privacy.noise_seed = Some(task_seed(seed, round, roster_index));
        }
        let payload = TaskPayload {
            model_spec: config.model_spec.clone(),
            loss: config.loss,
            epochs: config.local_epochs,
            batch_size: config.batch_size,
            lr: config.client_lr_for_round(round),
            seed: task_seed(config.seed, round, roster_index),
            privacy,
        };
        serde_json::to_value(payload).expect("payload serializes")
    }

    fn eval_payload(config: &ExperimentConfig) -> serde_json::Value {
        let payload = TaskPayload {
            model_spec: config.model_spec.clone(),
            loss: config.loss,
            epochs: 0,
            batch_size: 0,
            lr: 0.0,
            seed: 0,
            privacy: Default::default(),
        };
        serde_json::to_value(payload).expect("payload serializes")
    }

    /// Enqueues one task per endpoint; endpoints that refuse are reported
    /// back by roster index with the reason.
    fn fan_out(
        &self,
        exp: &Experiment,
        targets: &[(usize, String, TaskEnvelope)],
        pending: &mut HashMap<String, usize>,
    ) -> Vec<(usize, String)> {
        let mut refused = Vec::new();
        for (index, endpoint_id, envelope) in targets {
            let task_id = envelope.task_id.clone();
            match self.dispatch.enqueue(&exp.federation_id, endpoint_id, envelope.clone()) {
                Ok(()) => {
                    pending.insert(task_id, *index);
                }
                Err(e) => refused.push((*index, e.to_string())),
            }
        }
        refused
    }

    fn fetch_model(&self, result: &TaskResult, like: &ParameterVector) -> Result<ParameterVector, String> {
        let digest = result
            .result_blob
            .as_ref()
            .ok_or("train result without result_blob")?;
        let bytes = self.blobs.get(&digest.sha256).map_err(|e| e.to_string())?;
        let weights = deserialize::<f64>(&bytes).map_err(|e| e.to_string())?;
        if !weights.same_layout(like) {
            return Err("returned model layout differs from the global model".into());
        }
        Ok(weights)
    }

    fn put_model(&self, exp: &Experiment, model: &ParameterVector) -> ApiResult<BlobDigest> {
        self.blobs.put(&exp.federation_id, &serialize(model))
    }

    /// Turns a finished train event into an update or a failed round entry.
    fn accept_train(
        &self,
        event: TaskEvent,
        roster_index: usize,
        like: &ParameterVector,
    ) -> Result<Returned, Box<ClientRoundEntry>> {
        let failure = |status, message: String, metrics, wall| Box::new(ClientRoundEntry {
            status,
            metrics,
            wall_seconds: wall,
            sample_count: 0,
            val_accuracy: None,
            val_loss: None,
            val_samples: None,
            dp_clipped_norm: None,
            staleness: None,
            error_message: Some(message),
        });
        match event {
            TaskEvent::Expired { .. } => Err(failure(
                ClientRoundStatus::TimedOut,
                "task deadline passed".into(),
                None,
                None,
            )),
            TaskEvent::Finished { task, result, .. } => {
                if result.status == TaskStatus::Failure {
                    return Err(failure(
                        ClientRoundStatus::Failure,
                        result.error_message.unwrap_or_default(),
                        None,
                        Some(result.wall_seconds),
                    ));
                }
                if result.sample_count == 0 {
                    return Err(failure(
                        ClientRoundStatus::Failure,
                        "client reported zero training samples".into(),
                        Some(result.metrics),
                        Some(result.wall_seconds),
                    ));
                }
                match self.fetch_model(&result, like) {
                    Ok(weights) => Ok(Returned {
                        roster_index,
                        weights,
                        sample_count: result.sample_count,
                        metrics: result.metrics,
                        base_round: task.round,
                    }),
                    Err(message) => Err(failure(
                        ClientRoundStatus::Failure,
                        message,
                        Some(result.metrics),
                        Some(result.wall_seconds),
                    )),
                }
            }
        }
    }

    async fn collect_histograms(&self, exp: &Experiment, inbox: &mut Inbox) {
        let config = exp.snapshot().config;
        let timeout = self.settings.histogram_timeout.as_secs_f64();
        let targets: Vec<_> = config
            .roster
            .iter()
            .enumerate()
            .map(|(i, ep)| {
                let env = self.envelope(
                    exp,
                    TaskKind::DataHistogram,
                    0,
                    serde_json::json!({ "num_classes": config.model_spec.num_classes }),
                    None,
                    timeout,
                );
                (i, ep.clone(), env)
            })
            .collect();
        let mut pending = HashMap::new();
        for (i, reason) in self.fan_out(exp, &targets, &mut pending) {
            self.log(exp, format!("histogram request to {} refused: {reason}", config.roster[i]));
        }
        let deadline = Instant::now() + self.settings.histogram_timeout;
        let mut histograms = BTreeMap::new();
        while !pending.is_empty() {
            let Some(event) = inbox.next_for(&pending, deadline).await else {
                break;
            };
            let index = pending.remove(&event.task().task_id).expect("filtered by inbox");
            let endpoint_id = config.roster[index].clone();
            match event {
                TaskEvent::Finished { result, .. } if result.status == TaskStatus::Success => {
                    let counts = result.histogram.unwrap_or_default();
                    let empty = counts.iter().all(|&c| c == 0);
                    if empty {
                        self.log(exp, format!("warning: {endpoint_id} reports an empty training set"));
                    }
                    histograms.insert(endpoint_id, LabelHistogram { counts, empty });
                }
                other => self.log(
                    exp,
                    format!("no label histogram from {endpoint_id}: {}", describe(&other)),
                ),
            }
        }
        if !pending.is_empty() {
            self.dispatch
                .cancel_where(|t, _| pending.contains_key(&t.task_id));
        }
        let _ = self.update(exp, |r| r.data_histograms = histograms);
    }

    /// Dispatches evaluation of `model` to every endpoint in `roster`. The
    /// global accuracy and loss are sample-weighted means over responders.
    async fn evaluate_global(
        &self,
        exp: &Experiment,
        inbox: &mut Inbox,
        round: u64,
        model_blob: &BlobDigest,
        roster: &[(usize, String)],
        per_client: &mut BTreeMap<String, ClientRoundEntry>,
    ) -> (Option<f64>, Option<f64>) {
        let config = exp.snapshot().config;
        let timeout = self.settings.eval_timeout;
        let targets: Vec<_> = roster
            .iter()
            .map(|(i, ep)| {
                let env = self.envelope(
                    exp,
                    TaskKind::Evaluate,
                    round,
                    Self::eval_payload(&config),
                    Some(model_blob.clone()),
                    timeout.as_secs_f64(),
                );
                (*i, ep.clone(), env)
            })
            .collect();
        let mut pending = HashMap::new();
        for (i, reason) in self.fan_out(exp, &targets, &mut pending) {
            self.log(exp, format!("round {round}: evaluation on {} refused: {reason}", config.roster[i]));
        }
        let deadline = Instant::now() + timeout;
        let (mut acc, mut loss, mut samples) = (0.0, 0.0, 0u64);
        while !pending.is_empty() {
            let Some(event) = inbox.next_for(&pending, deadline).await else {
                break;
            };
            let index = pending.remove(&event.task().task_id).expect("filtered by inbox");
            let endpoint_id = &config.roster[index];
            match event {
                TaskEvent::Finished { result, .. }
                    if result.status == TaskStatus::Success && result.sample_count > 0 =>
                {
                    let n = result.sample_count;
                    acc += result.metrics.accuracy * n as f64;
                    loss += result.metrics.loss * n as f64;
                    samples += n;
                    if let Some(entry) = per_client.get_mut(endpoint_id) {
                        entry.val_accuracy = Some(result.metrics.accuracy);
                        entry.val_loss = Some(result.metrics.loss);
                        entry.val_samples = Some(n);
                    }
                }
                other => self.log(
                    exp,
                    format!("round {round}: evaluation on {endpoint_id} failed: {}", describe(&other)),
                ),
            }
        }
        if !pending.is_empty() {
            self.dispatch
                .cancel_where(|t, _| pending.contains_key(&t.task_id));
        }
        if samples == 0 {
            self.log(exp, format!("warning: round {round}: no client evaluated the global model"));
            return (None, None);
        }
        (Some(acc / samples as f64), Some(loss / samples as f64))
    }

    fn task_timeout(config: &ExperimentConfig, previous_median_s: Option<f64>) -> f64 {
        match previous_median_s {
            Some(m) => (10.0 * m).max(MIN_TASK_TIMEOUT_S).min(config.round_timeout_s),
            None => config.round_timeout_s,
        }
    }

    async fn run_sync(
        &self,
        exp: &Experiment,
        inbox: &mut Inbox,
        global: ParameterVector,
    ) -> Result<BlobDigest, Stop> {
        let config = exp.snapshot().config;
        let mut state = AggregatorState::new(config.algorithm, global, config.aggregator_hyper);
        let roster: Vec<(usize, String)> = config.roster.iter().cloned().enumerate().collect();
        let quorum = config.quorum_size();
        let mut previous_median = None;
        let mut global_blob = self.put_model(exp, &state.global_model)?;

        for round in 1..=config.rounds {
            let started_at = self.clock.now();
            let lr = config.client_lr_for_round(round);
            let timeout = Self::task_timeout(&config, previous_median);
            let targets: Vec<_> = roster
                .iter()
                .map(|(i, ep)| {
                    let env = self.envelope(
                        exp,
                        TaskKind::Train,
                        state.round,
                        Self::train_payload(&config, round, *i),
                        Some(global_blob.clone()),
                        timeout,
                    );
                    (*i, ep.clone(), env)
                })
                .collect();
            let mut pending = HashMap::new();
            let mut per_client = BTreeMap::new();
            for (i, reason) in self.fan_out(exp, &targets, &mut pending) {
                per_client.insert(config.roster[i].clone(), failed_entry(ClientRoundStatus::Failure, reason));
            }
            self.log(
                exp,
                format!("round {round}: dispatched {} train tasks (lr {lr})", pending.len()),
            );

            let deadline = Instant::now() + StdDuration::from_secs_f64(config.round_timeout_s);
            let mut returned = Vec::new();
            while returned.len() < quorum && !pending.is_empty() {
                let Some(event) = inbox.next_for(&pending, deadline).await else {
                    break;
                };
                let index = pending.remove(&event.task().task_id).expect("filtered by inbox");
                let endpoint_id = config.roster[index].clone();
                match self.accept_train(event.clone(), index, &state.global_model) {
                    Ok(update) => {
                        let wall = match &event {
                            TaskEvent::Finished { result, .. } => Some(result.clone()),
                            _ => None,
                        };
                        let result = wall.expect("accepted results are finished events");
                        self.log(
                            exp,
                            format!(
                                "round {round}: {endpoint_id} done in {:.2}s (loss {:.4}, train acc {:.4}, {} samples)",
                                result.wall_seconds, update.metrics.loss, update.metrics.accuracy, update.sample_count
                            ),
                        );
                        per_client.insert(endpoint_id, success_entry(&result, None));
                        returned.push(update);
                    }
                    Err(entry) => {
                        self.log(
                            exp,
                            format!(
                                "round {round}: {endpoint_id} {:?}: {}",
                                entry.status,
                                entry.error_message.as_deref().unwrap_or("")
                            ),
                        );
                        per_client.insert(endpoint_id, *entry);
                    }
                }
            }
            if !pending.is_empty() {
                self.dispatch
                    .cancel_where(|t, _| pending.contains_key(&t.task_id));
                for index in pending.values() {
                    let why = if returned.len() >= quorum {
                        "not awaited: quorum already reached"
                    } else {
                        "no result before round_timeout_s"
                    };
                    per_client.insert(
                        config.roster[*index].clone(),
                        failed_entry(ClientRoundStatus::TimedOut, why.into()),
                    );
                }
            }
            if returned.len() < quorum {
                let missing: Vec<&str> = config
                    .roster
                    .iter()
                    .filter(|ep| per_client.get(*ep).is_none_or(|e| e.status != ClientRoundStatus::Success))
                    .map(String::as_str)
                    .collect();
                self.record_round(exp, round, started_at, lr, per_client, (None, None), None, None)?;
                return Err(Stop::Failed(format!(
                    "round {round}: quorum not reached ({} of {} results, need {quorum}); missing: {}",
                    returned.len(),
                    roster.len(),
                    missing.join(", ")
                )));
            }

            returned.sort_by_key(|u| u.roster_index);
            let mut walls: Vec<f64> = per_client
                .values()
                .filter(|e| e.status == ClientRoundStatus::Success)
                .filter_map(|e| e.wall_seconds)
                .collect();
            previous_median = median(&mut walls);
            let updates: Vec<ClientUpdate<f64>> = returned
                .into_iter()
                .map(|r| ClientUpdate {
                    endpoint_id: config.roster[r.roster_index].clone(),
                    base_round: r.base_round,
                    weights: r.weights,
                    sample_count: r.sample_count,
                    metrics: r.metrics,
                })
                .collect();
            state = aggregation::aggregate(&state, &updates)
                .map_err(|e| Stop::Failed(format!("round {round}: aggregation failed: {e}")))?;
            global_blob = self.put_model(exp, &state.global_model)?;
            let metrics = self
                .evaluate_global(exp, inbox, state.round, &global_blob, &roster, &mut per_client)
                .await;
            self.record_round(exp, round, started_at, lr, per_client, metrics, Some(global_blob.clone()), None)?;
        }
        Ok(global_blob)
    }

    async fn run_async(
        &self,
        exp: &Experiment,
        inbox: &mut Inbox,
        global: ParameterVector,
    ) -> Result<BlobDigest, Stop> {
        let config = exp.snapshot().config;
        let hyper = config.aggregator_hyper;
        let mut state = AggregatorState::new(config.algorithm, global, hyper);
        let mut global_blob = self.put_model(exp, &state.global_model)?;
        let timeout = config.round_timeout_s;
        let mut active: Vec<(usize, String)> = config.roster.iter().cloned().enumerate().collect();
        let mut pending = HashMap::new();

        let train_target = |state: &AggregatorState<f64>, blob: &BlobDigest, i: usize, ep: &str| {
            let env = self.envelope(
                exp,
                TaskKind::Train,
                state.round,
                Self::train_payload(&config, state.round + 1, i),
                Some(blob.clone()),
                timeout,
            );
            (i, ep.to_string(), env)
        };
        let initial: Vec<_> = active
            .iter()
            .map(|(i, ep)| train_target(&state, &global_blob, *i, ep))
            .collect();
        for (i, reason) in self.fan_out(exp, &initial, &mut pending) {
            self.log(exp, format!("{} retired: {reason}", config.roster[i]));
            active.retain(|(j, _)| *j != i);
        }
        self.log(exp, format!("dispatched {} initial train tasks", pending.len()));

        let mut round_started = self.clock.now();
        let mut per_client = BTreeMap::new();
        while state.round < config.rounds {
            if pending.is_empty() {
                return Err(Stop::Failed("every client has been retired".into()));
            }
            let deadline = Instant::now() + StdDuration::from_secs_f64(timeout);
            let Some(event) = inbox.next_for(&pending, deadline).await else {
                return Err(Stop::Failed(format!(
                    "no client result within {timeout}s after {} aggregations",
                    state.round
                )));
            };
            let index = pending.remove(&event.task().task_id).expect("filtered by inbox");
            let endpoint_id = config.roster[index].clone();
            let finished = match &event {
                TaskEvent::Finished { result, .. } => Some(result.clone()),
                TaskEvent::Expired { .. } => None,
            };
            let update = match self.accept_train(event, index, &state.global_model) {
                Ok(update) => update,
                Err(entry) => {
                    self.log(
                        exp,
                        format!(
                            "{endpoint_id} retired after {:?}: {}",
                            entry.status,
                            entry.error_message.as_deref().unwrap_or("")
                        ),
                    );
                    per_client.insert(endpoint_id, *entry);
                    active.retain(|(j, _)| *j != index);
                    continue;
                }
            };
            let staleness = state
                .staleness(update.base_round)
                .map_err(|e| Stop::Failed(e.to_string()))?;
            let lr_used = config.client_lr_for_round(update.base_round + 1);
            let client_update = ClientUpdate {
                endpoint_id: endpoint_id.clone(),
                base_round: update.base_round,
                weights: update.weights,
                sample_count: update.sample_count,
                metrics: update.metrics,
            };
            let (next, emitted, mixing) = match config.algorithm {
                Algorithm::FedAsync => {
                    let next = aggregation::step_fedasync(&state, &client_update)
                        .map_err(|e| Stop::Failed(e.to_string()))?;
                    (next, true, Some(staleness_weight(&hyper, staleness)))
                }
                _ => {
                    let (next, emitted) = aggregation::step_fedbuff(&state, &client_update)
                        .map_err(|e| Stop::Failed(e.to_string()))?;
                    (next, emitted, None)
                }
            };
            state = next;
            let result = finished.expect("accepted results are finished events");
            self.log(
                exp,
                format!(
                    "{endpoint_id}: update from round {} applied with staleness {staleness}{}",
                    update.base_round,
                    mixing.map(|a| format!(" (mixing weight {a:.4})")).unwrap_or_default()
                ),
            );
            per_client.insert(endpoint_id.clone(), success_entry(&result, Some(staleness)));

            if emitted {
                global_blob = self.put_model(exp, &state.global_model)?;
                let round = state.round;
                let mut entries = std::mem::take(&mut per_client);
                let metrics = self
                    .evaluate_global(exp, inbox, round, &global_blob, &active, &mut entries)
                    .await;
                self.record_round(
                    exp,
                    round,
                    round_started,
                    lr_used,
                    entries,
                    metrics,
                    Some(global_blob.clone()),
                    mixing,
                )?;
                round_started = self.clock.now();
            }
            if state.round < config.rounds {
                let target = train_target(&state, &global_blob, index, &endpoint_id);
                for (i, reason) in self.fan_out(exp, &[target], &mut pending) {
                    self.log(exp, format!("{} retired: {reason}", config.roster[i]));
                    active.retain(|(j, _)| *j != i);
                }
            }
        }
        if !pending.is_empty() {
            self.dispatch
                .cancel_where(|t, _| pending.contains_key(&t.task_id));
        }
        Ok(global_blob)
    }

    #[allow(clippy::too_many_arguments)]
    fn record_round(
        &self,
        exp: &Experiment,
        round: u64,
        started_at: Timestamp,
        client_lr_used: f64,
        per_client: BTreeMap<String, ClientRoundEntry>,
        (accuracy, loss): (Option<f64>, Option<f64>),
        global_model: Option<BlobDigest>,
        mixing_weight: Option<f64>,
    ) -> Result<(), Stop> {
        let completed = global_model.is_some();
        let record = RoundRecord {
            round,
            per_client,
            global_val_accuracy: accuracy,
            global_val_loss: loss,
            started_at,
            finished_at: completed.then(|| self.clock.now()),
            client_lr_used,
            global_model,
            mixing_weight,
        };
        if completed {
            self.log(
                exp,
                format!(
                    "round {round} complete: global val accuracy {} loss {}",
                    accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
                    loss.map_or("n/a".into(), |l| format!("{l:.4}"))
                ),
            );
            self.update(exp, |r| r.rounds.push(record))?;
        }
        Ok(())
    }

    /// Log lines from `from_line` on. With `wait`, blocks until a new line
    /// arrives, the experiment ends or the wait elapses.
    pub async fn logs(&self, experiment_id: &str, from_line: u64, wait: StdDuration) -> ApiResult<LogsResponse> {
        let exp = self.get(experiment_id)?;
        let deadline = Instant::now() + wait.min(StdDuration::from_secs_f64(MAX_LOG_WAIT_S));
        loop {
            let notified = exp.changed.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            let response = {
                let r = exp.record.lock().unwrap();
                LogsResponse {
                    lines: r.log.iter().skip(from_line as usize).cloned().collect(),
                    next_line: r.log.len() as u64,
                    status: r.status,
                }
            };
            if !response.lines.is_empty() || response.status.is_terminal() {
                return Ok(response);
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return Ok(response);
            }
        }
    }

    pub fn report(&self, experiment_id: &str) -> ApiResult<Report> {
        let r = self.get(experiment_id)?.snapshot();
        let rows = r
            .rounds
            .iter()
            .map(|round| ReportRow {
                round: round.round,
                global_val_accuracy: round.global_val_accuracy,
                global_val_loss: round.global_val_loss,
                client_lr_used: round.client_lr_used,
                clients: round
                    .per_client
                    .iter()
                    .map(|(id, e)| {
                        (
                            id.clone(),
                            ClientReportCell {
                                val_accuracy: e.val_accuracy,
                                wall_seconds: e.wall_seconds,
                                train_loss: e.metrics.map(|m| m.loss),
                                status: e.status,
                            },
                        )
                    })
                    .collect(),
            })
            .collect();
        let laplace = r.config.privacy.mechanism == Mechanism::Laplace;
        let privacy = PrivacySummary {
            mechanism: r.config.privacy.mechanism,
            epsilon_per_round: r.config.privacy.epsilon.filter(|_| laplace),
            composed_epsilon: r
                .config
                .privacy
                .epsilon
                .filter(|_| laplace)
                .map(|e| e * r.config.rounds as f64),
            clip_norm: r.config.privacy.clip_norm.filter(|_| laplace),
        };
        Ok(Report {
            experiment_id: r.config.experiment_id.clone(),
            status: r.status,
            rows,
            final_model: r.final_model.clone(),
            privacy,
            data_histograms: r.data_histograms.clone(),
            config: r.config,
        })
    }

    /// Aligned per-round global accuracy of several experiments of one
    /// federation.
    pub fn compare(&self, experiment_ids: &[String]) -> ApiResult<ComparisonReport> {
        if experiment_ids.is_empty() {
            return Err(ApiError::InvalidRequest("name at least one experiment".into()));
        }
        let exps = experiment_ids
            .iter()
            .map(|id| self.get(id))
            .collect::<ApiResult<Vec<_>>>()?;
        if exps.iter().any(|e| e.federation_id != exps[0].federation_id) {
            return Err(ApiError::InvalidRequest(
                "experiments from different federations cannot be compared".into(),
            ));
        }
        let records: Vec<ExperimentRecord> = exps.iter().map(|e| e.snapshot()).collect();
        let rounds = records.iter().map(|r| r.config.rounds).max().unwrap_or(0);
        let series = records
            .into_iter()
            .map(|r| {
                let mut accuracy = vec![None; rounds as usize];
                for round in &r.rounds {
                    if let Some(slot) = accuracy.get_mut(round.round as usize - 1) {
                        *slot = round.global_val_accuracy;
                    }
                }
                AccuracySeries {
                    experiment_id: r.config.experiment_id.clone(),
                    name: r.config.name,
                    algorithm: r.config.algorithm,
                    accuracy,
                }
            })
            .collect();
        Ok(ComparisonReport { rounds, series })
    }

    /// Dispatches data_histogram tasks to `roster` and waits for them.
    pub async fn collect_data_distribution(
        &self,
        federation_id: &str,
        roster: &[String],
        num_classes: Option<usize>,
    ) -> ApiResult<BTreeMap<String, LabelHistogram>> {
        let mut offline = Vec::new();
        for ep in roster {
            let record = self
                .dispatch
                .endpoint(ep)
                .ok()
                .filter(|e| e.federation_id == federation_id)
                .ok_or_else(|| ApiError::UnknownEndpoint(ep.clone()))?;
            if !self.dispatch.is_reachable(ep) {
                offline.push(format!("{} ({})", record.name, record.endpoint_id));
            }
        }
        if !offline.is_empty() {
            return Err(ApiError::EndpointOffline(offline));
        }
        let channel = format!("distribution-{}", uuid::Uuid::new_v4());
        let mut inbox = Inbox {
            rx: self.dispatch.subscribe(&channel),
            stash: VecDeque::new(),
        };
        let timeout = self.settings.histogram_timeout;
        let mut pending = HashMap::new();
        let mut refused = Vec::new();
        for (i, ep) in roster.iter().enumerate() {
            let envelope = TaskEnvelope {
                task_id: uuid::Uuid::new_v4().to_string(),
                experiment_id: channel.clone(),
                round: 0,
                kind: TaskKind::DataHistogram,
                config_payload: serde_json::json!({ "num_classes": num_classes }),
                model_blob: None,
                deadline: self.clock.now() + Duration::milliseconds(timeout.as_millis() as i64),
            };
            let task_id = envelope.task_id.clone();
            match self.dispatch.enqueue(federation_id, ep, envelope) {
                Ok(()) => {
                    pending.insert(task_id, i);
                }
                Err(e) => refused.push(e),
            }
        }
        let deadline = Instant::now() + timeout;
        let mut out = BTreeMap::new();
        let mut failures = Vec::new();
        while !pending.is_empty() {
            let Some(event) = inbox.next_for(&pending, deadline).await else {
                break;
            };
            let index = pending.remove(&event.task().task_id).expect("filtered by inbox");
            match event {
                TaskEvent::Finished { result, .. } if result.status == TaskStatus::Success => {
                    let counts = result.histogram.unwrap_or_default();
                    let empty = counts.iter().all(|&c| c == 0);
                    out.insert(roster[index].clone(), LabelHistogram { counts, empty });
                }
                other => failures.push(format!("{}: {}", roster[index], describe(&other))),
            }
        }
        self.dispatch.cancel_where(|t, _| t.experiment_id == channel);
        self.dispatch.unsubscribe(&channel);
        if let Some(e) = refused.into_iter().next() {
            return Err(e);
        }
        for index in pending.values() {
            failures.push(format!("{}: no answer in time", roster[*index]));
        }
        if !failures.is_empty() {
            return Err(ApiError::Conflict(format!(
                "histograms unavailable from {}",
                failures.join("; ")
            )));
        }
        Ok(out)
    }

    /// Withdraws pending tasks of the given endpoints (used when a member
    /// is removed from a federation).
    pub fn withdraw_endpoint_tasks(&self, endpoint_ids: &[String]) -> usize {
        let set: HashSet<&String> = endpoint_ids.iter().collect();
        self.dispatch.cancel_where(|_, ep| set.contains(&ep.to_string()))
    }
}

fn describe(event: &TaskEvent) -> String {
    match event {
        TaskEvent::Expired { .. } => "deadline passed".into(),
        TaskEvent::Finished { result, .. } => result
            .error_message
            .clone()
            .unwrap_or_else(|| format!("{:?}", result.status)),
    }
}

fn failed_entry(status: ClientRoundStatus, message: String) -> ClientRoundEntry {
    ClientRoundEntry {
        status,
        metrics: None,
        wall_seconds: None,
        sample_count: 0,
        val_accuracy: None,
        val_loss: None,
        val_samples: None,
        dp_clipped_norm: None,
        staleness: None,
        error_message: Some(message),
    }
}

fn success_entry(result: &TaskResult, staleness: Option<u64>) -> ClientRoundEntry {
    ClientRoundEntry {
        status: ClientRoundStatus::Success,
        metrics: Some(result.metrics),
        wall_seconds: Some(result.wall_seconds),
        sample_count: result.sample_count,
        val_accuracy: None,
        val_loss: None,
        val_samples: None,
        dp_clipped_norm: result.dp_clipped_norm,
        staleness,
        error_message: None,
    }
}
