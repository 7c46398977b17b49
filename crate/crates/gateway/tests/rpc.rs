//! The gateway over real HTTP against the same services called directly.

use std::sync::Arc;

use gridhelm_core::error::ERROR_CODES;
use gridhelm_core::estimators::{estimate_queue_time, estimate_runtime_detail, estimate_transfer_time};
use gridhelm_core::grid::Grid;
use gridhelm_core::model::{SiteId, TaskId};
use gridhelm_core::scenario::Scenario;
use gridhelm_gateway::protocol::{INVALID_PARAMS, INVALID_REQUEST, METHOD_NOT_FOUND, PARSE_ERROR, UNKNOWN_SERVICE};
use gridhelm_gateway::{spawn, Client, ClientError, Gateway, RegistryError, Running, SubscribeBatch};
use serde_json::{json, Value};

const GRID: &str = "\
site A slots=1 load=1.0
site B slots=2 load=0 cost=0.5
link A B bandwidth=10MB
record user=alice queue=q cpu_hours=1 runtime=100
record user=alice queue=q cpu_hours=2 runtime=190
task t1 job=j1 user=alice queue=q cpu_hours=1 runtime=100 inputs=d:20MB@A
task t2 job=j1 user=alice queue=q cpu_hours=2 runtime=200
task t3 job=j2 user=bob queue=q cpu_hours=1 runtime=50
plan j1 t1=A t2=A
plan j2 t3=B
policy enabled=false
user alice password=pw role=user
user bob password=pw2 role=user
user root password=admin role=admin
";

fn grid() -> Grid {
    Grid::from_scenario(&Scenario::parse(GRID, None).unwrap(), None).unwrap()
}

async fn start() -> (Running, Client) {
    let gw = Arc::new(Gateway::new(grid()));
    let running = spawn(gw, "127.0.0.1:0", 0.0).await.unwrap();
    let client = Client::new(&running.url());
    (running, client)
}

fn rpc_code(e: ClientError) -> i64 {
    match e {
        ClientError::Rpc(e) => e.code,
        other => panic!("expected an rpc error, got {other}"),
    }
}

async fn login(c: &Client, user: &str, pw: &str) -> String {
    let s = c.call("steering.login", json!({ "user": user, "password": pw })).await.unwrap();
    s["session_id"].as_str().unwrap().to_string()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn transfer_passthrough() {
    let (srv, c) = start().await;
    let r = c.call("estimator.transfer", json!({ "from_site": "A", "to_site": "B", "bytes": 100_000_000u64 })).await.unwrap();
    assert_eq!(r["value"], json!(10.0));
    assert_eq!(r["kind"], json!("transfer"));
    let r = c.call("estimator.transfer", json!({ "bytes": 100_000_000u64, "bandwidth": 10e6 })).await.unwrap();
    assert_eq!(r["value"], json!(10.0));
    let bad = c.call("estimator.transfer", json!({ "bytes": 1, "bandwidth": 0.0 })).await.unwrap_err();
    assert_eq!(rpc_code(bad), INVALID_PARAMS);
    srv.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn wire_level_errors() {
    let (srv, c) = start().await;
    let (status, text) = c.post_raw("{not json".into()).await.unwrap();
    assert_eq!(status, 200);
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["error"]["code"], json!(PARSE_ERROR));
    assert_eq!(v["id"], Value::Null);

    let (_, text) = c.post_raw(r#"{"jsonrpc":"1.0","method":"fabric-admin.clock","id":1}"#.into()).await.unwrap();
    assert_eq!(serde_json::from_str::<Value>(&text).unwrap()["error"]["code"], json!(INVALID_REQUEST));
    let (_, text) = c.post_raw("[]".into()).await.unwrap();
    assert_eq!(serde_json::from_str::<Value>(&text).unwrap()["error"]["code"], json!(INVALID_REQUEST));

    assert_eq!(rpc_code(c.call("monitor.nothing", json!({})).await.unwrap_err()), METHOD_NOT_FOUND);
    assert_eq!(rpc_code(c.call("nobody.query", json!({})).await.unwrap_err()), METHOD_NOT_FOUND);
    assert_eq!(rpc_code(c.call("monitor.query", json!({ "task": 3 })).await.unwrap_err()), INVALID_PARAMS);
    assert_eq!(rpc_code(c.call("monitor.query", json!({ "task_id": "zz" })).await.unwrap_err()), 1401);

    // a notification gets no body
    let (status, text) = c.post_raw(r#"{"jsonrpc":"2.0","method":"fabric-admin.clock"}"#.into()).await.unwrap();
    assert_eq!((status, text.as_str()), (204, ""));
    srv.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn command_without_session_is_unauthorized() {
    let (srv, c) = start().await;
    let cmd = json!({ "target": { "task": "t1" }, "verb": "pause" });
    let e = c.call("steering.command", cmd).await.unwrap_err();
    match e {
        ClientError::Rpc(e) => {
            assert_eq!(e.code, 1601);
            assert_eq!(e.name(), Some("Unauthorized"));
        }
        other => panic!("{other}"),
    }
    srv.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn registry_lists_the_core_services() {
    let (srv, c) = start().await;
    let d = c.call("rpc.describe", Value::Null).await.unwrap();
    let names: Vec<&str> = d["services"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(names, vec!["estimator", "fabric-admin", "monitor", "scheduler", "steering"]);
    for s in d["services"].as_array().unwrap() {
        assert_eq!(s["endpoint"].as_str().unwrap(), srv.url());
    }
    let codes: Vec<i64> = d["errors"].as_array().unwrap().iter().map(|e| e["code"].as_i64().unwrap()).collect();
    for c in ERROR_CODES {
        assert!(codes.contains(&c.code), "{} missing", c.code);
    }
    let mut dedup = codes.clone();
    dedup.dedup();
    assert_eq!(dedup, codes, "codes are sorted and unique");

    let m = c.call("rpc.lookup", json!({ "service": "monitor" })).await.unwrap();
    assert_eq!(m["methods"], json!(["query", "list", "subscribe"]));
    assert_eq!(rpc_code(c.call("rpc.lookup", json!({ "service": "flock" })).await.unwrap_err()), UNKNOWN_SERVICE);

    assert!(matches!(srv.gateway.register("monitor", &["x"]), Err(RegistryError::DuplicateService(_))));
    let extra = srv.gateway.register("accounting", &["balance"]).unwrap();
    assert_eq!(srv.gateway.lookup("accounting").unwrap(), extra);
    // registered but with no handler behind it
    assert_eq!(rpc_code(c.call("accounting.balance", json!({})).await.unwrap_err()), METHOD_NOT_FOUND);
    srv.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn dispatch_equals_direct_invocation() {
    let (srv, c) = start().await;
    let root = login(&c, "root", "admin").await;
    c.call("fabric-admin.advance", json!({ "session_id": root, "to": 42.5 })).await.unwrap();

    let mut direct = grid();
    direct.run_until(42.5).unwrap();
    let canon = |v: &Value| serde_json::to_string(v).unwrap();
    let val = |v: serde_json::Result<Value>| v.unwrap();

    let checks: Vec<(&str, Value, Value)> = vec![
        (
            "monitor.query",
            json!({ "task_id": "t1" }),
            val(serde_json::to_value(direct.monitor.query(&direct.fabric, &direct.history, &TaskId::new("t1"), false).unwrap())),
        ),
        (
            "monitor.query",
            json!({ "task_id": "t2", "refresh": true }),
            val(serde_json::to_value(direct.monitor.query(&direct.fabric, &direct.history, &TaskId::new("t2"), true).unwrap())),
        ),
        (
            "monitor.list",
            json!({}),
            val(serde_json::to_value(direct.monitor.list(&direct.fabric, &direct.history, None).unwrap())),
        ),
        ("fabric-admin.sites", json!({}), val(serde_json::to_value(direct.fabric.sites()))),
        ("fabric-admin.event_log", json!({}), val(serde_json::to_value(direct.fabric.event_log()))),
        (
            "estimator.runtime",
            json!({ "task_id": "t2" }),
            val(serde_json::to_value(
                estimate_runtime_detail(&direct.history, &direct.fabric.task(&TaskId::new("t2")).unwrap().task.attributes).unwrap(),
            )),
        ),
        (
            "estimator.queue",
            json!({ "site_id": "A", "task_id": "t2" }),
            val(serde_json::to_value(
                estimate_queue_time(&direct.fabric, &direct.history, &SiteId::new("A"), &TaskId::new("t2")).unwrap(),
            )),
        ),
        (
            "estimator.transfer",
            json!({ "from_site": "B", "to_site": "A", "bytes": 12_345_678u64 }),
            val(serde_json::to_value(
                estimate_transfer_time(&direct.fabric, &SiteId::new("B"), &SiteId::new("A"), 12_345_678).unwrap(),
            )),
        ),
        ("steering.policy_get", json!({}), val(serde_json::to_value(direct.steering.policy()))),
        ("fabric-admin.clock", json!({}), json!({ "now": direct.now() })),
    ];
    for (method, params, expected) in checks {
        let got = c.call(method, params).await.unwrap();
        assert_eq!(canon(&got), canon(&expected), "{method}");
    }
    srv.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_reads_match_serial() {
    let (srv, c) = start().await;
    let root = login(&c, "root", "admin").await;
    c.call("fabric-admin.advance", json!({ "session_id": root, "to": 130.0 })).await.unwrap();
    let mut calls: Vec<(&str, Value)> = Vec::new();
    for _ in 0..8 {
        for t in ["t1", "t2", "t3"] {
            calls.push(("monitor.query", json!({ "task_id": t })));
        }
        calls.push(("monitor.list", json!({ "job_id": "j1" })));
        calls.push(("fabric-admin.sites", json!({})));
        calls.push(("estimator.queue", json!({ "site_id": "A", "task_id": "t2" })));
    }
    let mut serial = Vec::new();
    for (m, p) in &calls {
        serial.push(c.call(m, p.clone()).await.unwrap());
    }
    let client = Arc::new(c);
    let mut handles = Vec::new();
    for (m, p) in calls.clone() {
        let client = client.clone();
        let m = m.to_string();
        handles.push(tokio::spawn(async move { client.call(&m, p).await.unwrap() }));
    }
    let mut concurrent = Vec::new();
    for h in handles {
        concurrent.push(h.await.unwrap());
    }
    assert_eq!(concurrent, serial);
    let batch: Vec<Value> = client.batch(&calls).await.unwrap().into_iter().map(|r| r.unwrap()).collect();
    assert_eq!(batch, serial);
    srv.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn subscribe_long_polls_until_events_arrive() {
    let (srv, c) = start().await;
    let c = Arc::new(c);
    let first: SubscribeBatch = c.call_as("monitor.subscribe", json!({ "from_seq": 0 })).await.unwrap();
    let start_seq = first.next_seq;
    // nothing new: the poll times out empty and keeps the cursor
    let idle: SubscribeBatch = c.call_as("monitor.subscribe", json!({ "from_seq": start_seq, "timeout_ms": 50 })).await.unwrap();
    assert!(idle.events.is_empty());
    assert_eq!(idle.next_seq, start_seq);

    let waiter = {
        let c = c.clone();
        tokio::spawn(async move {
            c.call_as::<SubscribeBatch>("monitor.subscribe", json!({ "from_seq": start_seq, "timeout_ms": 10_000 })).await.unwrap()
        })
    };
    tokio::time::sleep(std::time::Duration::from_millis(100)).await;
    let root = login(&c, "root", "admin").await;
    c.call("fabric-admin.advance", json!({ "session_id": root, "to": 500.0 })).await.unwrap();
    let woke = waiter.await.unwrap();
    assert!(!woke.events.is_empty());
    assert_eq!(woke.events[0].seq, start_seq + 1);
    assert_eq!(woke.next_seq, woke.events.last().unwrap().seq);

    let all: SubscribeBatch = c.call_as("monitor.subscribe", json!({ "from_seq": 0 })).await.unwrap();
    let direct = srv.gateway.with_grid(|g| g.monitor.subscribe(0).unwrap());
    assert_eq!(all.events, direct);
    let capped: SubscribeBatch = c.call_as("monitor.subscribe", json!({ "from_seq": 0, "max": 2 })).await.unwrap();
    assert_eq!(capped.events, direct[..2].to_vec());
    assert_eq!(capped.next_seq, 2);
    srv.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn session_flow_over_the_wire() {
    let (srv, c) = start().await;
    assert_eq!(rpc_code(c.call("steering.login", json!({ "user": "alice", "password": "no" })).await.unwrap_err()), 1603);
    let alice = login(&c, "alice", "pw").await;
    let root = login(&c, "root", "admin").await;
    c.call("fabric-admin.advance", json!({ "session_id": root, "to": 5.0 })).await.unwrap();

    // not alice's job
    let kill = json!({ "session_id": alice, "target": { "task": "t3" }, "verb": "kill" });
    assert_eq!(rpc_code(c.call("steering.command", kill).await.unwrap_err()), 1601);
    let pause = json!({ "session_id": alice, "target": { "task": "t1" }, "verb": "pause" });
    let tasks = c.call("steering.command", pause).await.unwrap();
    assert_eq!(tasks[0]["state"], json!("PAUSED"));
    let q = c.call("monitor.query", json!({ "task_id": "t1" })).await.unwrap();
    assert_eq!(q["status"], json!("PAUSED"));

    // operator methods need an admin
    assert_eq!(rpc_code(c.call("fabric-admin.advance", json!({ "session_id": alice, "by": 1.0 })).await.unwrap_err()), 1601);
    let policy = json!({ "objective": "cheap", "check_interval": 5.0, "slowdown_threshold": 2.0, "enabled": true });
    assert_eq!(
        rpc_code(c.call("steering.policy_set", json!({ "session_id": alice, "policy": policy.clone() })).await.unwrap_err()),
        1601
    );
    let set = c.call("steering.policy_set", json!({ "session_id": root, "policy": policy.clone() })).await.unwrap();
    assert_eq!(set, policy);
    assert_eq!(c.call("steering.policy_get", Value::Null).await.unwrap(), policy);

    let log = c.call("steering.audit_log", json!({ "session_id": alice })).await.unwrap();
    let verbs: Vec<&Value> = log.as_array().unwrap().iter().map(|r| &r["verb"]).collect();
    assert!(verbs.contains(&&json!("pause")));

    c.call("steering.logout", json!({ "session_id": alice })).await.unwrap();
    let resume = json!({ "session_id": alice, "target": { "task": "t1" }, "verb": "resume" });
    assert_eq!(rpc_code(c.call("steering.command", resume).await.unwrap_err()), 1602);
    srv.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn submit_plan_and_follow_it() {
    let (srv, c) = start().await;
    let alice = login(&c, "alice", "pw").await;
    let job = json!({
        "job_id": "j9",
        "tasks": [{ "task_id": "n1", "user": "alice", "queue": "q", "cpu_hours": 1.0, "runtime": 30.0 }],
    });
    let plan = c.call("scheduler.plan", json!({ "job": job.clone() })).await.unwrap();
    assert_eq!(plan["plan"]["assignments"]["n1"], json!("B"), "the free site wins");
    let out = c.call("steering.submit_plan", json!({ "session_id": alice, "job": job.clone() })).await.unwrap();
    assert_eq!(out["plan"]["assignments"], plan["plan"]["assignments"]);
    // two matching records are too few for a leave-one-out regression, so
    // the estimate is their mean
    assert_eq!(out["estimates"]["n1"]["value"], json!((100.0 + 190.0) / 2.0));
    let again = c.call("steering.submit_plan", json!({ "session_id": alice, "job": job })).await.unwrap_err();
    assert_eq!(rpc_code(again), 1611);

    let root = login(&c, "root", "admin").await;
    c.call("fabric-admin.advance", json!({ "session_id": root, "by": 100.0 })).await.unwrap();
    let q = c.call("monitor.query", json!({ "task_id": "n1" })).await.unwrap();
    assert_eq!(q["status"], json!("COMPLETED"));
    let pkg = c.call("steering.download_state", json!({ "session_id": alice, "task_id": "n1" })).await.unwrap();
    assert_eq!(pkg["task_id"], json!("n1"));

    let dead = c.call("fabric-admin.fail_site", json!({ "session_id": root, "site_id": "A" })).await.unwrap();
    assert_eq!(dead["alive"], json!(false));
    let err = c.call("estimator.queue", json!({ "site_id": "A", "task_id": "t2" })).await.unwrap_err();
    assert_eq!(rpc_code(err), 1303);
    let back = c.call("fabric-admin.recover_site", json!({ "session_id": root, "site_id": "A" })).await.unwrap();
    assert_eq!(back["alive"], json!(true));
    srv.stop().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn unreachable_gateway_is_a_connection_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let c = Client::new(&addr.to_string());
    assert!(matches!(c.call("fabric-admin.clock", json!({})).await, Err(ClientError::Connection(_))));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn healthz_answers() {
    let (srv, c) = start().await;
    let url = c.url().replace("/rpc", "/healthz");
    let body: Value = reqwest::get(url).await.unwrap().json().await.unwrap();
    assert_eq!(body["status"], json!("ok"));
    srv.stop().await.unwrap();
}
