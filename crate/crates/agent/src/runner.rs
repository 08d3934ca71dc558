//! The agent loop: heartbeats on one thread, long-poll and execution on
//! another. All traffic is outbound. Transient failures (server down,
//! 5xx) are retried with exponential backoff; a rejected token ends the run.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use fedsilo_client::{Client, ClientError};
use fedsilo_core::api::{TaskEnvelope, TaskResult};
use fedsilo_core::params::{deserialize, serialize};
use fedsilo_core::ParameterVector;

use crate::config::AgentConfig;
use crate::executor::Executor;
use crate::resources::ResourceSampler;
use crate::AgentError;

pub const MIN_BACKOFF: Duration = Duration::from_secs(1);
pub const MAX_BACKOFF: Duration = Duration::from_secs(60);

/// Counters describing a finished run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub tasks_completed: u64,
    pub results_dropped: u64,
}

/// Shared between the agent threads and whoever wants to stop them.
#[derive(Debug, Default)]
struct Shared {
    stop: AtomicBool,
    fatal: Mutex<Option<String>>,
    completed: AtomicU64,
    dropped: AtomicU64,
}

impl Shared {
    fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    fn fail(&self, message: String) {
        self.fatal.lock().unwrap().get_or_insert(message);
        self.stop.store(true, Ordering::SeqCst);
    }

    /// Sleeps up to `d`, waking early when stopped. Returns false if stopped.
    fn sleep(&self, d: Duration) -> bool {
        let until = Instant::now() + d;
        while !self.stopped() {
            let left = until.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return true;
            }
            std::thread::sleep(left.min(Duration::from_millis(50)));
        }
        false
    }
}

/// A cheap handle that stops a running agent from another thread.
#[derive(Debug, Clone)]
pub struct StopHandle(Arc<Shared>);

impl StopHandle {
    pub fn stop(&self) {
        self.0.stop.store(true, Ordering::SeqCst);
    }
}

pub struct Agent {
    config: AgentConfig,
    client: Client,
    executor: Executor,
    shared: Arc<Shared>,
}

enum Retry<T> {
    Done(T),
    Stopped,
}

impl Agent {
    pub fn new(config: AgentConfig, executor: Executor) -> Self {
        let client = Client::new(&config.server_url, Some(config.agent_token.clone()));
        Self {
            config,
            client,
            executor,
            shared: Arc::new(Shared::default()),
        }
    }

    /// Loads the dataset named by the config and builds the agent.
    pub fn from_config(config: AgentConfig) -> Result<Self, AgentError> {
        let spec = config
            .data
            .clone()
            .ok_or_else(|| AgentError::Config("the agent config has no data section".into()))?;
        let data = fedsilo_core::data::load_dataset::<f64>(&spec)?;
        tracing::info!(
            rows = data.len(),
            features = data.n_features(),
            classes = data.num_classes(),
            "local dataset loaded"
        );
        let throttle = Duration::from_secs_f64(config.throttle_s);
        let executor = Executor::new(data, config.local_privacy, throttle);
        Ok(Self::new(config, executor))
    }

    pub fn stop_handle(&self) -> StopHandle {
        StopHandle(self.shared.clone())
    }

    /// Runs until stopped or the token is rejected.
    pub fn run(self) -> Result<RunSummary, AgentError> {
        let heartbeat = self.spawn_heartbeat();
        self.poll_loop();
        self.shared.stop.store(true, Ordering::SeqCst);
        let _ = heartbeat.join();
        let summary = RunSummary {
            tasks_completed: self.shared.completed.load(Ordering::SeqCst),
            results_dropped: self.shared.dropped.load(Ordering::SeqCst),
        };
        match self.shared.fatal.lock().unwrap().take() {
            Some(message) => Err(AgentError::Rejected(message)),
            None => Ok(summary),
        }
    }

    /// Runs on a background thread.
    pub fn spawn(self) -> (StopHandle, JoinHandle<Result<RunSummary, AgentError>>) {
        let handle = self.stop_handle();
        let name = format!("agent-{}", self.config.endpoint_id);
        let join = std::thread::Builder::new()
            .name(name)
            .spawn(move || self.run())
            .expect("spawn agent thread");
        (handle, join)
    }

    fn spawn_heartbeat(&self) -> JoinHandle<()> {
        let client = self.client.clone();
        let shared = self.shared.clone();
        let endpoint_id = self.config.endpoint_id.clone();
        let configured = Duration::from_secs_f64(self.config.heartbeat_interval_s);
        std::thread::spawn(move || {
            let mut sampler = ResourceSampler::new();
            let mut interval = configured;
            loop {
                match client.heartbeat(&endpoint_id, &sampler.sample()) {
                    Ok(resp) => {
                        // never beat slower than the server expects
                        if let Some(server) = resp.interval_s.filter(|s| s.is_finite() && *s > 0.0) {
                            interval = configured.min(Duration::from_secs_f64(server));
                        }
                    }
                    Err(e) if e.is_auth() => {
                        shared.fail(format!("heartbeat rejected: {e}"));
                        return;
                    }
                    Err(e) => tracing::warn!(error = %e, "heartbeat failed"),
                }
                if !shared.sleep(interval) {
                    return;
                }
            }
        })
    }

    /// Calls `op` until it succeeds, fails permanently, or the agent stops.
    fn retry<T>(&self, what: &str, mut op: impl FnMut() -> Result<T, ClientError>) -> Result<Retry<T>, ClientError> {
        let mut backoff = MIN_BACKOFF;
        loop {
            match op() {
                Ok(v) => return Ok(Retry::Done(v)),
                Err(e) if e.is_transient() => {
                    tracing::warn!(error = %e, retry_in = ?backoff, "{what} failed");
                    if !self.shared.sleep(backoff) {
                        return Ok(Retry::Stopped);
                    }
                    backoff = (backoff * 2).min(MAX_BACKOFF);
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn poll_loop(&self) {
        let wait = Duration::from_secs_f64(self.config.poll_wait_s);
        let endpoint_id = self.config.endpoint_id.clone();
        while !self.shared.stopped() {
            let tasks = match self.retry("poll", || self.client.poll_tasks(&endpoint_id, wait, 1)) {
                Ok(Retry::Done(tasks)) => tasks,
                Ok(Retry::Stopped) => return,
                Err(e) if e.is_auth() || e.status() == Some(404) => {
                    self.shared.fail(format!("polling rejected: {e}"));
                    return;
                }
                Err(e) => {
                    tracing::error!(error = %e, "poll failed");
                    if !self.shared.sleep(MIN_BACKOFF) {
                        return;
                    }
                    continue;
                }
            };
            for task in tasks {
                if let Err(e) = self.process(&task) {
                    if e.is_auth() {
                        self.shared.fail(format!("task {} rejected: {e}", task.task_id));
                        return;
                    }
                    tracing::error!(task = %task.task_id, error = %e, "task abandoned");
                    self.shared.dropped.fetch_add(1, Ordering::SeqCst);
                }
            }
        }
    }

    fn fetch_model(&self, task: &TaskEnvelope) -> Result<Option<Option<ParameterVector>>, ClientError> {
        let Some(digest) = &task.model_blob else {
            return Ok(Some(None));
        };
        match self.retry("model download", || self.client.get_blob(&digest.sha256))? {
            Retry::Stopped => Ok(None),
            Retry::Done(bytes) => match deserialize::<f64>(&bytes) {
                Ok(model) => Ok(Some(Some(model))),
                Err(e) => Err(ClientError::Decode(format!("model blob {}: {e}", digest.sha256))),
            },
        }
    }

    fn process(&self, task: &TaskEnvelope) -> Result<(), ClientError> {
        tracing::info!(task = %task.task_id, kind = ?task.kind, round = task.round, "task received");
        let model = match self.fetch_model(task) {
            Ok(Some(model)) => model,
            Ok(None) => return Ok(()),
            Err(e) if e.is_auth() => return Err(e),
            Err(e) => {
                let failure = TaskResult::failure(&task.task_id, e.to_string(), 0.0);
                return self.report(failure);
            }
        };
        let mut execution = self.executor.execute(task, model);
        if let Some(weights) = execution.upload.take() {
            let bytes = serialize(&weights);
            match self.retry("result upload", || self.client.put_blob(None, bytes.clone()))? {
                Retry::Done(digest) => execution.result.result_blob = Some(digest),
                Retry::Stopped => return Ok(()),
            }
        }
        self.report(execution.result)
    }

    fn report(&self, result: TaskResult) -> Result<(), ClientError> {
        let task_id = result.task_id.clone();
        match self.retry("result submission", || self.client.submit_result(&result)) {
            Ok(Retry::Done(())) => {
                self.shared.completed.fetch_add(1, Ordering::SeqCst);
                tracing::info!(task = %task_id, status = ?result.status, "result accepted");
                Ok(())
            }
            Ok(Retry::Stopped) => Ok(()),
            Err(e) if e.code() == Some("DuplicateResult") => Ok(()),
            Err(e) if e.code() == Some("UnknownTask") => {
                tracing::warn!(task = %task_id, "task was withdrawn or expired; result discarded");
                self.shared.dropped.fetch_add(1, Ordering::SeqCst);
                Ok(())
            }
            Err(e) => Err(e),
        }
    }
}
