//! HTTP transport: POST /rpc and GET /healthz.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use gridhelm_core::grid::Grid;
use gridhelm_core::scenario::Scenario;
use tokio::net::TcpListener;

use crate::service::Gateway;

pub const DEFAULT_ADDR: &str = "127.0.0.1:7878";

/// How often the pacer advances the clock.
const PACE_TICK: Duration = Duration::from_millis(100);

/// Server settings, normally read from the environment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ServerConfig {
    pub addr: Option<String>,
    pub store: Option<PathBuf>,
    pub scenario: Option<PathBuf>,
    /// Virtual seconds per wall-clock second; 0 leaves the clock to
    /// `fabric-admin.advance`.
    pub pace: f64,
}

impl ServerConfig {
    /// `GRIDHELM_ADDR`, `GRIDHELM_STORE`, `GRIDHELM_SCENARIO` and
    /// `GRIDHELM_PACE`.
    pub fn from_env() -> Result<Self, String> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let pace = match var("GRIDHELM_PACE") {
            Some(v) => v.parse::<f64>().map_err(|e| format!("GRIDHELM_PACE: {e}"))?,
            None => 0.0,
        };
        if !(pace >= 0.0 && pace.is_finite()) {
            return Err("GRIDHELM_PACE must be a non-negative number".into());
        }
        Ok(Self {
            addr: var("GRIDHELM_ADDR"),
            store: var("GRIDHELM_STORE").map(PathBuf::from),
            scenario: var("GRIDHELM_SCENARIO").map(PathBuf::from),
            pace,
        })
    }

    pub fn addr(&self) -> &str {
        self.addr.as_deref().unwrap_or(DEFAULT_ADDR)
    }

    /// The grid this configuration describes: the scenario file when one
    /// is set, else an empty grid.
    pub fn build_grid(&self) -> Result<Grid, String> {
        let sc = match &self.scenario {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                Scenario::parse(&text, path.parent()).map_err(|e| format!("{}: {e}", path.display()))?
            }
            None => Scenario::default(),
        };
        let mut grid = Grid::from_scenario(&sc, self.store.as_deref()).map_err(|e| e.to_string())?;
        // admit whatever is due at t=0 so an unpaced gateway has tasks to show
        grid.run_until(0.0).map_err(|e| e.to_string())?;
        Ok(grid)
    }
}

pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new().route("/rpc", post(rpc)).route("/healthz", get(healthz)).with_state(gateway)
}

async fn rpc(State(gw): State<Arc<Gateway>>, body: Bytes) -> Response {
    match gw.handle(&body).await {
        Some(v) => ([(header::CONTENT_TYPE, "application/json")], v.to_string()).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn healthz(State(gw): State<Arc<Gateway>>) -> impl IntoResponse {
    let now = gw.with_grid(|g| g.now());
    ([(header::CONTENT_TYPE, "application/json")], serde_json::json!({ "status": "ok", "now": now }).to_string())
}

/// A server running in the background of the current runtime.
pub struct Running {
    pub addr: SocketAddr,
    pub gateway: Arc<Gateway>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    pacer: Option<tokio::task::JoinHandle<()>>,
    task: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Running {
    pub fn url(&self) -> String {
        format!("http://{}/rpc", self.addr)
    }

    pub async fn stop(mut self) -> std::io::Result<()> {
        if let Some(p) = self.pacer.take() {
            p.abort();
        }
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.task.await.unwrap_or_else(|e| Err(std::io::Error::other(e)))
    }
}

/// Bind `addr` (port 0 picks a free one) and serve `gateway` until stopped.
/// With `pace > 0` the virtual clock advances with wall time.
pub async fn spawn(gateway: Arc<Gateway>, addr: &str, pace: f64) -> std::io::Result<Running> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    gateway.set_endpoint(&format!("http://{local}/rpc"));
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let pacer = (pace > 0.0).then(|| {
        let gw = gateway.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(PACE_TICK);
            loop {
                tick.tick().await;
                if gw.advance_by(pace * PACE_TICK.as_secs_f64()).is_err() {
                    break;
                }
            }
        })
    });
    let app = router(gateway.clone());
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    Ok(Running { addr: local, gateway, shutdown: Some(tx), pacer, task })
}
