//! Concurrent-client latency experiment against `monitor.query`.

use std::sync::Arc;
use std::time::Instant;

use gridhelm_core::grid::Grid;
use gridhelm_core::scenario::Scenario;
use gridhelm_gateway::{spawn, Client, ClientError, Gateway};
use serde_json::json;

pub const DEFAULT_SWEEP: &[u64] = &[1, 5, 10, 25, 50];
pub const DEFAULT_REQUESTS: usize = 100;

/// Grid served by the in-process gateway: a few running and queued tasks
/// on two sites, advanced past the first dispatch.
pub const LOAD_SCENARIO: &str = "\
site A slots=2 load=0.5
site B slots=4 load=0
link A B bandwidth=100MB
record user=u queue=q cpu_hours=1 runtime=600
task q1 job=j1 user=u queue=q runtime=600
task q2 job=j1 user=u queue=q runtime=500
task q3 job=j1 user=u queue=q runtime=400
task q4 job=j2 user=u queue=q runtime=300
task q5 job=j2 user=u queue=q runtime=200
task q6 job=j2 user=u queue=q runtime=100
plan j1 q1=A q2=A q3=A
plan j2 q4=B q5=B q6=B
policy enabled=false
";

/// Virtual time the load grid is advanced to before measuring.
pub const LOAD_WARM_TIME: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LoadRow {
    pub clients: usize,
    pub requests: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub failures: usize,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn to_csv(rows: &[LoadRow]) -> String {
    let mut s = String::from("N,mean_ms,p95_ms,failures\n");
    for r in rows {
        s.push_str(&format!("{},{:.4},{:.4},{}\n", r.clients, r.mean_ms, r.p95_ms, r.failures));
    }
    s
}

/// Problems with a sweep's output: missing rows, a non-increasing N
/// column, or failed requests.
pub fn self_check(rows: &[LoadRow], sweep: &[u64]) -> Vec<String> {
    let mut issues = Vec::new();
    if rows.len() != sweep.len() {
        issues.push(format!("{} rows for a sweep of {}", rows.len(), sweep.len()));
    }
    if rows.windows(2).any(|w| w[1].clients <= w[0].clients) {
        issues.push("N column is not increasing".into());
    }
    for r in rows {
        if r.failures > 0 {
            issues.push(format!("{} failed requests at N={}", r.failures, r.clients));
        }
    }
    issues
}

/// `clients` concurrent clients, each issuing `requests` sequential
/// `monitor.query` calls cycling through `tasks`. Each client opens its
/// own connection.
pub async fn measure(url: &str, clients: usize, requests: usize, tasks: &Arc<Vec<String>>) -> LoadRow {
    let mut handles = Vec::with_capacity(clients);
    for c in 0..clients {
        let url = url.to_string();
        let tasks = tasks.clone();
        handles.push(tokio::spawn(async move {
            let client = Client::new(&url);
            let mut lat = Vec::with_capacity(requests);
            let mut failures = 0;
            for i in 0..requests {
                let task = &tasks[(c + i) % tasks.len()];
                let t0 = Instant::now();
                let ok = client.call("monitor.query", json!({ "task_id": task })).await.is_ok();
                lat.push(t0.elapsed().as_secs_f64() * 1e3);
                if !ok {
                    failures += 1;
                }
            }
            (lat, failures)
        }));
    }
    let mut all = Vec::with_capacity(clients * requests);
    let mut failures = 0;
    for h in handles {
        match h.await {
            Ok((lat, f)) => {
                all.extend(lat);
                failures += f;
            }
            Err(_) => failures += requests,
        }
    }
    all.sort_by(f64::total_cmp);
    let mean_ms = if all.is_empty() { f64::NAN } else { all.iter().sum::<f64>() / all.len() as f64 };
    LoadRow { clients, requests, mean_ms, p95_ms: percentile(&all, 0.95), failures }
}

/// Task ids the gateway at `url` knows about.
pub async fn task_ids(url: &str) -> Result<Vec<String>, ClientError> {
    let list = Client::new(url).call("monitor.list", json!({})).await?;
    Ok(list
        .as_array()
        .map(|a| a.iter().filter_map(|r| r["task_id"].as_str().map(str::to_string)).collect())
        .unwrap_or_default())
}

/// Run the sweep against a gateway at `url`.
pub async fn run_sweep(url: &str, sweep: &[u64], requests: usize) -> Result<Vec<LoadRow>, ClientError> {
    let tasks = task_ids(url).await?;
    if tasks.is_empty() {
        return Err(ClientError::Protocol("the gateway has no tasks to query".into()));
    }
    let tasks = Arc::new(tasks);
    let mut rows = Vec::new();
    for &n in sweep {
        rows.push(measure(url, n as usize, requests, &tasks).await);
    }
    Ok(rows)
}

pub fn load_grid() -> Grid {
    let sc = Scenario::parse(LOAD_SCENARIO, None).expect("load scenario parses");
    let mut g = Grid::from_scenario(&sc, None).expect("load scenario builds");
    g.run_until(LOAD_WARM_TIME).expect("load scenario runs");
    g
}

/// Run the sweep against a gateway started in this process on an
/// ephemeral port.
pub async fn run_in_process(sweep: &[u64], requests: usize) -> Result<Vec<LoadRow>, ClientError> {
    let gw = Arc::new(Gateway::new(load_grid()));
    let running = spawn(gw, "127.0.0.1:0", 0.0).await.map_err(|e| ClientError::Connection(e.to_string()))?;
    let rows = run_sweep(&running.url(), sweep, requests).await;
    let _ = running.stop().await;
    rows
}
