//! Endpoint registry and the task fabric. Agents only ever make outbound
//! requests: they long-poll for work, post results and send heartbeats.
//!
//! A task is delivered to at most one poll response. Once delivered it is in
//! flight until a result arrives or its deadline passes; an expired task is
//! reported to its experiment and never delivered again.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Duration as StdDuration;

use chrono::{DateTime, Duration, Utc};
use fedsilo_core::api::{
    DeviceType, EndpointRecord, EndpointStatus, ResourceMetrics, TaskEnvelope, TaskKind, TaskResult,
    TaskStatus,
};
use tokio::sync::{mpsc, Notify};

use crate::clock::Clock;
use crate::error::{ApiError, ApiResult};
use crate::store::Store;

pub const DEFAULT_HEARTBEAT_INTERVAL_S: f64 = 5.0;
pub const OFFLINE_AFTER_MISSED_BEATS: i32 = 3;
pub const MAX_POLL_WAIT_S: f64 = 60.0;

/// What the fabric tells an experiment supervisor about its tasks.
#[derive(Debug, Clone)]
pub enum TaskEvent {
    Finished {
        task: TaskEnvelope,
        endpoint_id: String,
        result: TaskResult,
    },
    Expired {
        task: TaskEnvelope,
        endpoint_id: String,
    },
}

impl TaskEvent {
    pub fn task(&self) -> &TaskEnvelope {
        match self {
            TaskEvent::Finished { task, .. } | TaskEvent::Expired { task, .. } => task,
        }
    }

    pub fn endpoint_id(&self) -> &str {
        match self {
            TaskEvent::Finished { endpoint_id, .. } | TaskEvent::Expired { endpoint_id, .. } => {
                endpoint_id
            }
        }
    }
}

#[derive(Debug)]
struct Slot {
    envelope: TaskEnvelope,
    endpoint_id: String,
    delivered: bool,
}

#[derive(Default)]
struct Inner {
    endpoints: HashMap<String, EndpointRecord>,
    notifiers: HashMap<String, Arc<Notify>>,
    queues: HashMap<String, VecDeque<String>>,
    tasks: HashMap<String, Slot>,
    finished: HashSet<String>,
    subscribers: HashMap<String, mpsc::UnboundedSender<TaskEvent>>,
}

impl Inner {
    fn busy(&self, endpoint_id: &str) -> bool {
        self.tasks
            .values()
            .any(|s| s.delivered && s.endpoint_id == endpoint_id)
    }

    fn emit(&self, event: TaskEvent) {
        if let Some(tx) = self.subscribers.get(&event.task().experiment_id) {
            let _ = tx.send(event);
        }
    }

    fn remove_task(&mut self, task_id: &str) -> Option<Slot> {
        let slot = self.tasks.remove(task_id)?;
        if !slot.delivered {
            if let Some(q) = self.queues.get_mut(&slot.endpoint_id) {
                q.retain(|id| id != task_id);
            }
        }
        Some(slot)
    }
}

pub struct Dispatch {
    store: Store,
    clock: Arc<dyn Clock>,
    heartbeat_interval: Duration,
    inner: Mutex<Inner>,
}

impl Dispatch {
    pub fn open(store: Store, clock: Arc<dyn Clock>, heartbeat_interval_s: f64) -> ApiResult<Self> {
        let mut inner = Inner::default();
        for record in store.list::<EndpointRecord>("endpoints")? {
            inner
                .notifiers
                .insert(record.endpoint_id.clone(), Arc::new(Notify::new()));
            inner.endpoints.insert(record.endpoint_id.clone(), record);
        }
        Ok(Self {
            store,
            clock,
            heartbeat_interval: Duration::milliseconds((heartbeat_interval_s * 1000.0) as i64),
            inner: Mutex::new(inner),
        })
    }

    pub fn heartbeat_interval(&self) -> Duration {
        self.heartbeat_interval
    }

    fn status(&self, inner: &Inner, record: &EndpointRecord, now: DateTime<Utc>) -> EndpointStatus {
        let fresh = record
            .last_heartbeat
            .is_some_and(|t| now - t <= self.heartbeat_interval * OFFLINE_AFTER_MISSED_BEATS);
        match (fresh, inner.busy(&record.endpoint_id)) {
            (false, _) => EndpointStatus::Offline,
            (true, true) => EndpointStatus::Busy,
            (true, false) => EndpointStatus::Online,
        }
    }

    fn snapshot(&self, inner: &Inner, record: &EndpointRecord) -> EndpointRecord {
        EndpointRecord {
            status: self.status(inner, record, self.clock.now()),
            ..record.clone()
        }
    }

    pub fn register(
        &self,
        federation_id: &str,
        owner_account_id: &str,
        name: &str,
        device_type: DeviceType,
    ) -> ApiResult<EndpointRecord> {
        let name = name.trim();
        if name.is_empty() {
            return Err(ApiError::InvalidRequest("endpoint name must not be empty".into()));
        }
        let mut inner = self.inner.lock().unwrap();
        if inner
            .endpoints
            .values()
            .any(|e| e.federation_id == federation_id && e.name == name)
        {
            return Err(ApiError::DuplicateEndpointName(name.to_string()));
        }
        let record = EndpointRecord {
            endpoint_id: uuid::Uuid::new_v4().to_string(),
            federation_id: federation_id.to_string(),
            owner_account_id: owner_account_id.to_string(),
            name: name.to_string(),
            device_type,
            status: EndpointStatus::Offline,
            last_heartbeat: None,
            resources: None,
            registered_at: self.clock.now(),
        };
        self.store.put("endpoints", &record.endpoint_id, &record)?;
        inner
            .notifiers
            .insert(record.endpoint_id.clone(), Arc::new(Notify::new()));
        inner
            .endpoints
            .insert(record.endpoint_id.clone(), record.clone());
        Ok(record)
    }

    pub fn endpoint(&self, endpoint_id: &str) -> ApiResult<EndpointRecord> {
        let inner = self.inner.lock().unwrap();
        inner
            .endpoints
            .get(endpoint_id)
            .map(|r| self.snapshot(&inner, r))
            .ok_or_else(|| ApiError::UnknownEndpoint(endpoint_id.to_string()))
    }

    pub fn endpoints_in(&self, federation_id: &str) -> Vec<EndpointRecord> {
        let inner = self.inner.lock().unwrap();
        let mut out: Vec<EndpointRecord> = inner
            .endpoints
            .values()
            .filter(|e| e.federation_id == federation_id)
            .map(|r| self.snapshot(&inner, r))
            .collect();
        out.sort_by(|a, b| a.name.cmp(&b.name));
        out
    }

    pub fn is_reachable(&self, endpoint_id: &str) -> bool {
        self.endpoint(endpoint_id)
            .is_ok_and(|e| e.status != EndpointStatus::Offline)
    }

    pub fn heartbeat(&self, endpoint_id: &str, metrics: ResourceMetrics) -> ApiResult<EndpointStatus> {
        metrics.validate().map_err(ApiError::InvalidRequest)?;
        let now = self.clock.now();
        let mut inner = self.inner.lock().unwrap();
        let record = inner
            .endpoints
            .get_mut(endpoint_id)
            .ok_or_else(|| ApiError::UnknownEndpoint(endpoint_id.to_string()))?;
        record.last_heartbeat = Some(now);
        record.resources = Some(metrics);
        let record = record.clone();
        Ok(self.status(&inner, &record, now))
    }

    /// Receives events for tasks of one experiment, replacing any earlier
    /// subscription.
    pub fn subscribe(&self, experiment_id: &str) -> mpsc::UnboundedReceiver<TaskEvent> {
        let (tx, rx) = mpsc::unbounded_channel();
        self.inner
            .lock()
            .unwrap()
            .subscribers
            .insert(experiment_id.to_string(), tx);
        rx
    }

    pub fn unsubscribe(&self, experiment_id: &str) {
        self.inner.lock().unwrap().subscribers.remove(experiment_id);
    }

    /// Queues a task for an endpoint of `federation_id`.
    pub fn enqueue(&self, federation_id: &str, endpoint_id: &str, envelope: TaskEnvelope) -> ApiResult<()> {
        if matches!(envelope.kind, TaskKind::Train | TaskKind::Evaluate) && envelope.model_blob.is_none() {
            return Err(ApiError::InvalidRequest(
                "train and evaluate tasks need a model blob".into(),
            ));
        }
        let mut inner = self.inner.lock().unwrap();
        let endpoint = inner
            .endpoints
            .get(endpoint_id)
            .ok_or_else(|| ApiError::UnknownEndpoint(endpoint_id.to_string()))?;
        if endpoint.federation_id != federation_id {
            return Err(ApiError::CrossFederationDispatch {
                endpoint_id: endpoint_id.to_string(),
                experiment_id: envelope.experiment_id.clone(),
            });
        }
        if inner.tasks.contains_key(&envelope.task_id) || inner.finished.contains(&envelope.task_id) {
            return Err(ApiError::Conflict(format!("task {} already exists", envelope.task_id)));
        }
        let task_id = envelope.task_id.clone();
        inner.tasks.insert(
            task_id.clone(),
            Slot {
                envelope,
                endpoint_id: endpoint_id.to_string(),
                delivered: false,
            },
        );
        inner
            .queues
            .entry(endpoint_id.to_string())
            .or_default()
            .push_back(task_id);
        if let Some(n) = inner.notifiers.get(endpoint_id) {
            n.notify_waiters();
        }
        Ok(())
    }

    fn take(&self, endpoint_id: &str, max_tasks: usize) -> Vec<TaskEnvelope> {
        let now = self.clock.now();
        let mut inner = self.inner.lock().unwrap();
        let Inner { queues, tasks, .. } = &mut *inner;
        let Some(queue) = queues.get_mut(endpoint_id) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        while out.len() < max_tasks {
            let Some(task_id) = queue.pop_front() else { break };
            if let Some(slot) = tasks.get_mut(&task_id) {
                if slot.envelope.deadline <= now {
                    // left for the sweeper to report
                    continue;
                }
                slot.delivered = true;
                out.push(slot.envelope.clone());
            }
        }
        out
    }

    /// Returns up to `max_tasks` queued tasks, waiting up to `max_wait` for
    /// the first one to arrive.
    pub async fn poll(&self, endpoint_id: &str, max_wait: StdDuration, max_tasks: usize) -> ApiResult<Vec<TaskEnvelope>> {
        let notify = self
            .inner
            .lock()
            .unwrap()
            .notifiers
            .get(endpoint_id)
            .cloned()
            .ok_or_else(|| ApiError::UnknownEndpoint(endpoint_id.to_string()))?;
        let max_tasks = max_tasks.max(1);
        let deadline = tokio::time::Instant::now() + max_wait.min(StdDuration::from_secs_f64(MAX_POLL_WAIT_S));
        loop {
            let notified = notify.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            let tasks = self.take(endpoint_id, max_tasks);
            if !tasks.is_empty() {
                return Ok(tasks);
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return Ok(Vec::new());
            }
        }
    }

    /// Accepts the first result for an in-flight task of `endpoint_id`.
    pub fn submit(&self, endpoint_id: &str, result: TaskResult) -> ApiResult<()> {
        if !(result.wall_seconds.is_finite() && result.wall_seconds >= 0.0) {
            return Err(ApiError::InvalidRequest("wall_seconds must be non-negative".into()));
        }
        let mut inner = self.inner.lock().unwrap();
        if inner.finished.contains(&result.task_id) {
            return Err(ApiError::DuplicateResult(result.task_id));
        }
        let slot = match inner.tasks.get(&result.task_id) {
            Some(s) if s.delivered && s.endpoint_id == endpoint_id => s,
            _ => return Err(ApiError::UnknownTask(result.task_id)),
        };
        match result.status {
            TaskStatus::Success if slot.envelope.kind == TaskKind::Train && result.result_blob.is_none() => {
                return Err(ApiError::InvalidRequest(
                    "a successful train result needs result_blob".into(),
                ))
            }
            TaskStatus::Failure if result.error_message.is_none() => {
                return Err(ApiError::InvalidRequest(
                    "a failure result needs error_message".into(),
                ))
            }
            _ => {}
        }
        let slot = inner.remove_task(&result.task_id).expect("checked above");
        inner.finished.insert(result.task_id.clone());
        inner.emit(TaskEvent::Finished {
            task: slot.envelope,
            endpoint_id: slot.endpoint_id,
            result,
        });
        Ok(())
    }

    /// Expires every queued or in-flight task whose deadline has passed.
    pub fn sweep(&self) -> usize {
        let now = self.clock.now();
        let mut inner = self.inner.lock().unwrap();
        let expired: Vec<String> = inner
            .tasks
            .iter()
            .filter(|(_, s)| s.envelope.deadline <= now)
            .map(|(id, _)| id.clone())
            .collect();
        for id in &expired {
            let slot = inner.remove_task(id).expect("listed above");
            inner.emit(TaskEvent::Expired {
                task: slot.envelope,
                endpoint_id: slot.endpoint_id,
            });
        }
        expired.len()
    }

    /// Drops queued and in-flight tasks matching `pred` without reporting
    /// them; later results for them are rejected as unknown.
    pub fn cancel_where(&self, pred: impl Fn(&TaskEnvelope, &str) -> bool) -> usize {
        let mut inner = self.inner.lock().unwrap();
        let doomed: Vec<String> = inner
            .tasks
            .iter()
            .filter(|(_, s)| pred(&s.envelope, &s.endpoint_id))
            .map(|(id, _)| id.clone())
            .collect();
        for id in &doomed {
            inner.remove_task(id);
        }
        doomed.len()
    }

    pub fn pending_for(&self, endpoint_id: &str) -> usize {
        self.inner
            .lock()
            .unwrap()
            .tasks
            .values()
            .filter(|s| s.endpoint_id == endpoint_id)
            .count()
    }
}
