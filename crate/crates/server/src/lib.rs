//! The fedsilo orchestrator: identity and federations, the endpoint and
//! task fabric, the content-addressed blob store and the experiment
//! supervisor, served as a REST API under /api/v1.

pub mod blobs;
pub mod clock;
pub mod dispatch;
pub mod error;
pub mod http;
pub mod iam;
pub mod orchestrator;
pub mod store;

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Weak};
use std::time::Duration as StdDuration;

use axum::Router;
use tokio::net::TcpListener;

pub use blobs::BlobStore;
pub use clock::{Clock, ManualClock, SystemClock};
pub use dispatch::Dispatch;
pub use error::{ApiError, ApiResult};
pub use iam::{Iam, Principal, Scope};
pub use orchestrator::{Orchestrator, OrchestratorSettings};
pub use store::Store;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub data_dir: PathBuf,
    pub heartbeat_interval_s: f64,
    pub token_ttl: chrono::Duration,
    /// Dashboard bundle served at /. Without it / shows a short index page.
    pub static_dir: Option<PathBuf>,
    pub orchestrator: OrchestratorSettings,
    /// How often expired tasks are swept.
    pub sweep_interval: StdDuration,
}

impl ServerConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            heartbeat_interval_s: dispatch::DEFAULT_HEARTBEAT_INTERVAL_S,
            token_ttl: chrono::Duration::hours(24),
            static_dir: None,
            orchestrator: OrchestratorSettings::default(),
            sweep_interval: StdDuration::from_millis(250),
        }
    }
}

/// Everything the handlers share.
pub struct AppState {
    pub clock: Arc<dyn Clock>,
    pub store: Store,
    pub iam: Iam,
    pub dispatch: Arc<Dispatch>,
    pub blobs: Arc<BlobStore>,
    pub orchestrator: Arc<Orchestrator>,
    static_dir: Option<PathBuf>,
}

/// Opens the store under `config.data_dir` and loads all persisted state.
/// Must run inside a tokio runtime: it starts the task sweeper, which stops
/// once the state is dropped.
pub fn build(config: &ServerConfig, clock: Arc<dyn Clock>) -> ApiResult<Arc<AppState>> {
    let store = Store::open(&config.data_dir)?;
    let iam = Iam::open(store.clone(), clock.clone(), config.token_ttl)?;
    let dispatch = Arc::new(Dispatch::open(
        store.clone(),
        clock.clone(),
        config.heartbeat_interval_s,
    )?);
    let blobs = Arc::new(BlobStore::open(store.clone())?);
    let orchestrator = Orchestrator::open(
        store.clone(),
        clock.clone(),
        dispatch.clone(),
        blobs.clone(),
        config.orchestrator.clone(),
    )?;
    let state = Arc::new(AppState {
        clock,
        store,
        iam,
        dispatch,
        blobs,
        orchestrator,
        static_dir: config.static_dir.clone(),
    });
    tokio::spawn(sweep(Arc::downgrade(&state.dispatch), config.sweep_interval));
    Ok(state)
}

async fn sweep(dispatch: Weak<Dispatch>, every: StdDuration) {
    let mut tick = tokio::time::interval(every);
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tick.tick().await;
        let Some(dispatch) = dispatch.upgrade() else {
            return;
        };
        let expired = dispatch.sweep();
        if expired > 0 {
            tracing::info!(expired, "expired tasks");
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = http::api_router();
    let app = match &state.static_dir {
        Some(dir) => {
            let files = tower_http::services::ServeDir::new(dir).append_index_html_on_directories(true);
            api.fallback_service(files)
        }
        None => api,
    };
    app.with_state(state)
}

/// Serves until `shutdown` resolves. The state outlives the listener, so a
/// new listener can serve the same state afterwards.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let addr = listener.local_addr()?;
    tracing::info!(%addr, "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

/// A server running on a background task.
pub struct RunningServer {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl RunningServer {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting connections and waits for open requests to finish.
    pub async fn stop(mut self) -> Arc<AppState> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        let _ = (&mut self.task).await;
        self.state
    }

    /// Stops immediately, dropping open connections.
    pub fn abort(self) -> Arc<AppState> {
        self.task.abort();
        self.state
    }
}

/// Binds `addr` and serves `state` on a background task.
pub async fn start(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<RunningServer> {
    let listener = TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let task = tokio::spawn(serve(listener, state.clone(), async move {
        let _ = rx.await;
    }));
    Ok(RunningServer {
        addr,
        state,
        stop: Some(tx),
        task,
    })
}
