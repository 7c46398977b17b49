//! The services behind the gateway: one grid, the registry, and the method
//! table that maps `service.method` names onto it.

use std::time::Duration;

use gridhelm_core::estimators::{
    estimate_queue_time, estimate_queue_time_hypothetical, estimate_runtime_detail, estimate_transfer_time, evaluate,
    evaluate_records, transfer_over, QueueProbe,
};
use gridhelm_core::grid::{Grid, JobSubmission};
use gridhelm_core::history::{parse_trace, HistoryStore};
use gridhelm_core::model::{JobId, SiteId, TaskAttributes, TaskId, VirtualTime};
use gridhelm_core::steering::{Actor, OptimizerPolicy, Role, SteeringCommand, SteeringError};
use parking_lot::RwLock;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::watch;

use crate::protocol::{error_table, Request, Response, RpcError};
use crate::registry::{Registry, RegistryError, ServiceDescriptor};

/// The core services and their methods, as registered at startup.
pub const SERVICES: &[(&str, &[&str])] = &[
    (
        "steering",
        &["login", "logout", "submit_plan", "command", "policy_get", "policy_set", "audit_log", "download_state"],
    ),
    ("monitor", &["query", "list", "subscribe"]),
    ("estimator", &["runtime", "queue", "transfer", "evaluate"]),
    ("scheduler", &["plan", "resubmit"]),
    ("fabric-admin", &["advance", "sites", "fail_site", "recover_site", "event_log", "clock"]),
];

/// Methods served under a shared lock; they never change the grid.
pub const READ_METHODS: &[&str] = &[
    "estimator.evaluate",
    "estimator.queue",
    "estimator.runtime",
    "estimator.transfer",
    "fabric-admin.clock",
    "fabric-admin.event_log",
    "fabric-admin.sites",
    "monitor.list",
    "monitor.query",
    "scheduler.plan",
    "steering.audit_log",
    "steering.download_state",
    "steering.policy_get",
];

/// Methods on the gateway itself; not a registered service.
pub const RPC_METHODS: &[&str] = &["rpc.describe", "rpc.lookup"];

/// Longest a subscribe call may block.
pub const MAX_POLL: Duration = Duration::from_secs(30);

pub struct Gateway {
    grid: RwLock<Grid>,
    registry: RwLock<Registry>,
    seq: watch::Sender<u64>,
}

fn params<T: DeserializeOwned>(v: Value) -> Result<T, RpcError> {
    let v = if v.is_null() { json!({}) } else { v };
    serde_json::from_value(v).map_err(|e| RpcError::invalid_params(e.to_string()))
}

fn to_value<T: Serialize>(v: T) -> Result<Value, RpcError> {
    serde_json::to_value(v).map_err(|e| RpcError::internal(e.to_string()))
}

#[derive(Deserialize)]
struct SessionOnly {
    #[serde(default)]
    session_id: Option<String>,
}

#[derive(Deserialize)]
struct LoginParams {
    user: String,
    password: String,
}

#[derive(Deserialize)]
struct SubmitParams {
    #[serde(default)]
    session_id: Option<String>,
    job: JobSubmission,
}

#[derive(Deserialize)]
struct PolicySetParams {
    #[serde(default)]
    session_id: Option<String>,
    policy: OptimizerPolicy,
}

#[derive(Deserialize)]
struct AuditParams {
    #[serde(default)]
    session_id: Option<String>,
    #[serde(default)]
    from: usize,
}

#[derive(Deserialize)]
struct TaskParams {
    #[serde(default)]
    session_id: Option<String>,
    task_id: TaskId,
}

#[derive(Deserialize)]
struct QueryParams {
    task_id: TaskId,
    #[serde(default)]
    refresh: bool,
}

#[derive(Deserialize)]
struct ListParams {
    #[serde(default)]
    job_id: Option<JobId>,
}

#[derive(Deserialize)]
struct SubscribeParams {
    #[serde(default)]
    from_seq: u64,
    #[serde(default)]
    timeout_ms: u64,
    #[serde(default)]
    max: Option<usize>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RuntimeParams {
    Task { task_id: TaskId },
    Attributes { attributes: TaskAttributes },
}

#[derive(Deserialize)]
struct QueueParams {
    site_id: SiteId,
    task_id: TaskId,
    /// Position a task that does not exist yet with these queue keys.
    #[serde(default)]
    priority: Option<i64>,
    #[serde(default)]
    submit_time: Option<VirtualTime>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TransferParams {
    Sites { from_site: SiteId, to_site: SiteId, bytes: u64 },
    Link { bytes: u64, bandwidth: f64 },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EvaluateParams {
    Text { history_csv: String, test_csv: String },
    Paths { history_path: String, test_path: String },
}

#[derive(Deserialize)]
struct PlanParams {
    #[serde(default)]
    session_id: Option<String>,
    job: JobSubmission,
}

#[derive(Deserialize)]
struct ResubmitParams {
    #[serde(default)]
    session_id: Option<String>,
    task_id: TaskId,
    #[serde(default)]
    exclude: Vec<SiteId>,
    #[serde(default)]
    checkpoint: Option<f64>,
}

#[derive(Deserialize)]
struct AdvanceParams {
    #[serde(default)]
    session_id: Option<String>,
    #[serde(default)]
    to: Option<VirtualTime>,
    #[serde(default)]
    by: Option<f64>,
}

#[derive(Deserialize)]
struct SiteParams {
    #[serde(default)]
    session_id: Option<String>,
    site_id: SiteId,
}

#[derive(Deserialize)]
struct EventLogParams {
    #[serde(default)]
    from: usize,
}

#[derive(Deserialize)]
struct LookupParams {
    service: String,
}

/// Reply to `monitor.subscribe`: the batch, and the seq to resume from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubscribeBatch {
    pub events: Vec<gridhelm_core::monitoring::MonitoringEvent>,
    pub next_seq: u64,
}

fn require_admin(grid: &Grid, token: Option<&str>) -> Result<(), RpcError> {
    let s = grid.steering.sessions.validate(token, grid.now())?;
    if s.role != Role::Admin {
        return Err(SteeringError::Unauthorized.into());
    }
    Ok(())
}

impl Gateway {
    /// A gateway over `grid` with the core services registered.
    pub fn new(grid: Grid) -> Self {
        let mut registry = Registry::new("/rpc");
        for (name, methods) in SERVICES {
            registry.register(name, methods).expect("core service names are distinct");
        }
        let (seq, _) = watch::channel(grid.monitor.last_seq());
        Self { grid: RwLock::new(grid), registry: RwLock::new(registry), seq }
    }

    /// Run `f` with exclusive access to the grid. Changes to the event feed
    /// wake pending subscribers.
    pub fn with_grid<R>(&self, f: impl FnOnce(&mut Grid) -> R) -> R {
        let mut g = self.grid.write();
        let out = f(&mut g);
        self.seq.send_replace(g.monitor.last_seq());
        out
    }

    /// Run `f` with shared access to the grid.
    pub fn read_grid<R>(&self, f: impl FnOnce(&Grid) -> R) -> R {
        f(&self.grid.read())
    }

    pub fn register(&self, name: &str, methods: &[&str]) -> Result<ServiceDescriptor, RegistryError> {
        self.registry.write().register(name, methods).cloned()
    }

    pub fn lookup(&self, name: &str) -> Result<ServiceDescriptor, RegistryError> {
        self.registry.read().lookup(name).cloned()
    }

    pub fn services(&self) -> Vec<ServiceDescriptor> {
        self.registry.read().list().into_iter().cloned().collect()
    }

    pub fn set_endpoint(&self, endpoint: &str) {
        self.registry.write().set_endpoint(endpoint);
    }

    /// Advance the virtual clock by `dt` seconds.
    pub fn advance_by(&self, dt: f64) -> Result<VirtualTime, RpcError> {
        self.with_grid(|g| {
            let to = g.now() + dt;
            g.run_until(to)?;
            Ok(g.now())
        })
    }

    /// Handle a raw request body: a single request or a batch. `None` when
    /// nothing needs answering (only notifications).
    pub async fn handle(&self, body: &[u8]) -> Option<Value> {
        let parsed: Value = match serde_json::from_slice(body) {
            Ok(v) => v,
            Err(e) => return Some(to_json(Response::err(Value::Null, RpcError::parse(e.to_string())))),
        };
        match parsed {
            Value::Array(items) if items.is_empty() => {
                Some(to_json(Response::err(Value::Null, RpcError::invalid_request("empty batch"))))
            }
            Value::Array(items) => {
                let mut out = Vec::new();
                for item in items {
                    if let Some(r) = self.handle_one(item).await {
                        out.push(to_json(r));
                    }
                }
                (!out.is_empty()).then_some(Value::Array(out))
            }
            single => self.handle_one(single).await.map(to_json),
        }
    }

    async fn handle_one(&self, item: Value) -> Option<Response> {
        let id_hint = item.get("id").cloned().unwrap_or(Value::Null);
        let req: Request = match serde_json::from_value(item) {
            Ok(r) => r,
            Err(e) => return Some(Response::err(id_hint, RpcError::invalid_request(e.to_string()))),
        };
        if req.jsonrpc != "2.0" {
            return Some(Response::err(id_hint, RpcError::invalid_request("jsonrpc must be \"2.0\"")));
        }
        let result = self.call(&req.method, req.params).await;
        let id = req.id?;
        Some(match result {
            Ok(v) => Response::ok(id, v),
            Err(e) => Response::err(id, e),
        })
    }

    /// Invoke one method by name.
    pub async fn call(&self, method: &str, p: Value) -> Result<Value, RpcError> {
        if method == "monitor.subscribe" {
            if self.registry.read().resolve(method).is_none() {
                return Err(RpcError::method_not_found(method));
            }
            return self.subscribe(params(p)?).await.and_then(to_value);
        }
        self.call_sync(method, p)
    }

    fn call_sync(&self, method: &str, p: Value) -> Result<Value, RpcError> {
        match method {
            "rpc.describe" => {
                let services = self.services();
                return to_value(json!({ "services": services, "rpc": RPC_METHODS, "errors": error_table() }));
            }
            "rpc.lookup" => {
                let LookupParams { service } = params(p)?;
                return to_value(self.lookup(&service)?);
            }
            _ => {}
        }
        if self.registry.read().resolve(method).is_none() {
            return Err(RpcError::method_not_found(method));
        }
        if READ_METHODS.contains(&method) {
            return dispatch_read(&self.grid.read(), method, p);
        }
        self.with_grid(|g| dispatch_write(g, method, p))
    }

    async fn subscribe(&self, p: SubscribeParams) -> Result<SubscribeBatch, RpcError> {
        let wait = Duration::from_millis(p.timeout_ms).min(MAX_POLL);
        let deadline = tokio::time::Instant::now() + wait;
        let mut rx = self.seq.subscribe();
        loop {
            rx.borrow_and_update();
            let mut events = self.grid.read().monitor.subscribe(p.from_seq)?;
            if !events.is_empty() || tokio::time::Instant::now() >= deadline {
                if let Some(max) = p.max {
                    events.truncate(max.max(1));
                }
                let next_seq = events.last().map_or(p.from_seq, |e| e.seq);
                return Ok(SubscribeBatch { events, next_seq });
            }
            let _ = tokio::time::timeout_at(deadline, rx.changed()).await;
        }
    }
}

fn to_json(r: Response) -> Value {
    serde_json::to_value(r).expect("responses serialize")
}

fn dispatch_read(g: &Grid, method: &str, p: Value) -> Result<Value, RpcError> {
    let now = g.now();
    match method {
        "steering.policy_get" => to_value(g.steering.policy()),
        "steering.audit_log" => {
            let AuditParams { session_id, from } = params(p)?;
            let records = g.steering.audit_log(Actor::Session(session_id.as_deref()), now)?;
            to_value(&records[from.min(records.len())..])
        }
        "steering.download_state" => {
            let TaskParams { session_id, task_id } = params(p)?;
            to_value(g.steering.download_state(Actor::Session(session_id.as_deref()), &task_id, now)?)
        }
        "monitor.query" => {
            let QueryParams { task_id, refresh } = params(p)?;
            to_value(g.monitor.query(&g.fabric, &g.history, &task_id, refresh)?)
        }
        "monitor.list" => {
            let ListParams { job_id } = params(p)?;
            to_value(g.monitor.list(&g.fabric, &g.history, job_id.as_ref())?)
        }
        "estimator.runtime" => {
            let attributes = match params(p)? {
                RuntimeParams::Task { task_id } => {
                    let view = g.fabric.task(&task_id).ok_or_else(|| {
                        gridhelm_core::estimators::EstimatorError::UnknownTask(task_id.clone())
                    })?;
                    view.task.attributes
                }
                RuntimeParams::Attributes { attributes } => attributes,
            };
            to_value(estimate_runtime_detail(&g.history, &attributes)?)
        }
        "estimator.queue" => {
            let q: QueueParams = params(p)?;
            let est = if g.fabric.has_task(&q.task_id) {
                estimate_queue_time(&g.fabric, &g.history, &q.site_id, &q.task_id)?
            } else {
                let probe = QueueProbe {
                    task_id: q.task_id,
                    priority: q.priority.unwrap_or(0),
                    submit_time: q.submit_time.unwrap_or(now),
                };
                estimate_queue_time_hypothetical(&g.fabric, &g.history, &q.site_id, &probe)?
            };
            to_value(est)
        }
        "estimator.transfer" => match params(p)? {
            TransferParams::Sites { from_site, to_site, bytes } => {
                to_value(estimate_transfer_time(&g.fabric, &from_site, &to_site, bytes)?)
            }
            TransferParams::Link { bytes, bandwidth } => {
                if !(bandwidth > 0.0 && bandwidth.is_finite()) {
                    return Err(RpcError::invalid_params("bandwidth must be positive"));
                }
                to_value(transfer_over(bytes, bandwidth))
            }
        },
        "estimator.evaluate" => {
            let report = match params(p)? {
                EvaluateParams::Text { history_csv, test_csv } => {
                    let mut history = HistoryStore::in_memory();
                    history.ingest_trace(history_csv.as_bytes(), "history")?;
                    let (test, _skipped) = parse_trace(test_csv.as_bytes(), "test")?;
                    evaluate_records(&history, &test)?
                }
                EvaluateParams::Paths { history_path, test_path } => {
                    evaluate(history_path.as_ref(), test_path.as_ref())?
                }
            };
            to_value(report)
        }
        "scheduler.plan" => {
            let PlanParams { session_id, job } = params(p)?;
            let by = match session_id.as_deref() {
                Some(t) => g.steering.sessions.validate(Some(t), now)?.user.clone(),
                None => "anonymous".to_string(),
            };
            let (job, _) = job.to_job()?;
            to_value(g.scheduler.plan(&g.fabric, &g.history, &job, &by, now)?)
        }
        "fabric-admin.sites" => to_value(g.fabric.sites()),
        "fabric-admin.event_log" => {
            let EventLogParams { from } = params(p)?;
            let log = g.fabric.event_log();
            to_value(&log[from.min(log.len())..])
        }
        "fabric-admin.clock" => Ok(json!({ "now": now })),
        _ => Err(RpcError::method_not_found(method)),
    }
}

fn dispatch_write(g: &mut Grid, method: &str, p: Value) -> Result<Value, RpcError> {
    let now = g.now();
    match method {
        "steering.login" => {
            let LoginParams { user, password } = params(p)?;
            to_value(g.steering.login(&user, &password, now)?)
        }
        "steering.logout" => {
            let SessionOnly { session_id } = params(p)?;
            let token = session_id.ok_or(SteeringError::Unauthorized)?;
            g.steering.logout(&token)?;
            Ok(Value::Bool(true))
        }
        "steering.submit_plan" => {
            let SubmitParams { session_id, job } = params(p)?;
            to_value(g.submit(Actor::Session(session_id.as_deref()), &job)?)
        }
        "steering.command" => {
            let cmd: SteeringCommand = params(p)?;
            to_value(g.command(Actor::Session(cmd.session_id.as_deref()), &cmd)?)
        }
        "steering.policy_set" => {
            let PolicySetParams { session_id, policy } = params(p)?;
            g.set_policy(Actor::Session(session_id.as_deref()), policy)?;
            to_value(g.steering.policy())
        }
        "scheduler.resubmit" => {
            let r: ResubmitParams = params(p)?;
            require_admin(g, r.session_id.as_deref())?;
            to_value(g.scheduler.resubmit(&mut g.fabric, &mut g.history, &r.task_id, &r.exclude, r.checkpoint)?)
        }
        "fabric-admin.advance" => {
            let a: AdvanceParams = params(p)?;
            require_admin(g, a.session_id.as_deref())?;
            let to = match (a.to, a.by) {
                (Some(t), None) => t,
                (None, Some(d)) if d >= 0.0 => now + d,
                _ => return Err(RpcError::invalid_params("give exactly one of `to` or a non-negative `by`")),
            };
            g.run_until(to)?;
            Ok(json!({ "now": g.now() }))
        }
        "fabric-admin.fail_site" => {
            let s: SiteParams = params(p)?;
            require_admin(g, s.session_id.as_deref())?;
            g.fabric.fail_site(&s.site_id)?;
            g.sync_monitor();
            to_value(g.fabric.site(&s.site_id)?)
        }
        "fabric-admin.recover_site" => {
            let s: SiteParams = params(p)?;
            require_admin(g, s.session_id.as_deref())?;
            g.fabric.recover_site(&s.site_id)?;
            g.sync_monitor();
            to_value(g.fabric.site(&s.site_id)?)
        }
        _ => Err(RpcError::method_not_found(method)),
    }
}
