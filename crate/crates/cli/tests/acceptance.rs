//! Acceptance suite. Each test prints one line with its verdict, what was
//! measured, and the wall-clock time against its limit:
//!
//!     cargo test -p gridhelm-cli --test acceptance -- --nocapture
//!
//! Tests hold a common lock so timings are taken one at a time.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use gridhelm_cli::load;
use gridhelm_core::estimators::estimate_queue_time;
use gridhelm_core::experiments::{migration_experiment, run_and_replay, runtime_experiment, runtime_sweep};
use gridhelm_core::fabric::{Fabric, SimParams, SiteSpec, TransferLeg};
use gridhelm_core::grid::Grid;
use gridhelm_core::history::HistoryStore;
use gridhelm_core::model::{
    transition, Estimate, EstimateMethod, JobId, JobType, SiteId, Task, TaskAttributes, TaskId, TaskState,
};
use gridhelm_core::scenario::Scenario;
use gridhelm_core::steering::{Verb, MISSED_HEARTBEAT_LIMIT};
use gridhelm_core::trace::TraceConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

/// Run `check`, print its line, and fail the test unless it held within
/// `limit`.
fn criterion(name: &str, limit: Duration, check: impl FnOnce() -> Result<String, String>) {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let outcome = check();
    let took = t0.elapsed();
    let in_time = took <= limit;
    let (pass, detail) = match &outcome {
        Ok(d) if in_time => (true, d.clone()),
        Ok(d) => (false, format!("{d}; over the time limit")),
        Err(d) => (false, d.clone()),
    };
    println!(
        "ACCEPTANCE {} {name}: {detail} [{:.3}s of {}s]",
        if pass { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        limit.as_secs()
    );
    assert!(pass, "{name}: {detail}");
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn attrs(priority: i64) -> TaskAttributes {
    TaskAttributes {
        user: "u".into(),
        account: "acct".into(),
        queue_name: "q".into(),
        partition: "main".into(),
        job_type: JobType::Batch,
        nodes: 1,
        requested_cpu_hours: 1.0,
        input_files: vec![],
        priority,
    }
}

// ---- runtime estimator -----------------------------------------------------------

#[test]
fn runtime_estimator_protocol() {
    criterion("runtime estimator protocol", Duration::from_secs(5), || {
        let exact = runtime_experiment(TraceConfig::new(0, 0.0)).map_err(|e| e.to_string())?;
        ensure(exact.cases.len() == 20, || format!("{} test cases at sigma=0", exact.cases.len()))?;
        // MAPE is reported in percent; the tolerance is relative
        let rel = exact.mean_absolute_error / 100.0;
        ensure(rel.abs() <= 1e-9, || format!("sigma=0 MAPE {}%", exact.mean_absolute_error))?;
        let sweep = runtime_sweep(0..20, 0.10).map_err(|e| e.to_string())?;
        ensure(sweep.len() == 20, || format!("{} repetitions", sweep.len()))?;
        let worst = sweep.iter().map(|(_, m)| *m).fold(f64::NEG_INFINITY, f64::max);
        let mean = sweep.iter().map(|(_, m)| m).sum::<f64>() / sweep.len() as f64;
        ensure(sweep.iter().all(|(_, m)| *m <= 15.0), || format!("sigma=0.10 worst MAPE {worst:.3}% > 15%"))?;
        Ok(format!(
            "sigma=0 MAPE {:.3e}%; sigma=0.10 over 20 seeds mean {mean:.3}% worst {worst:.3}% (limit 15%)",
            exact.mean_absolute_error
        ))
    });
}

// ---- queue estimator -------------------------------------------------------------

struct QueueInstance {
    fabric: Fabric,
    history: HistoryStore,
    site: SiteId,
}

fn queue_instance(rng: &mut ChaCha8Rng, slots: u32) -> QueueInstance {
    let mut fabric = Fabric::new();
    let site = SiteId::new("S");
    fabric.add_site(SiteSpec::new("S", slots)).unwrap();
    let mut history = HistoryStore::in_memory();
    let n = rng.random_range(1..=12);
    let mut now = 0.0;
    for i in 0..n {
        now += rng.random_range(0.0..20.0);
        fabric.advance(now).unwrap();
        let id = TaskId::new(format!("t{:02}", n - i));
        let task = Task::new(id.clone(), JobId::new("j"), attrs(rng.random_range(0..3)));
        fabric.admit(task, SimParams::runtime(rng.random_range(10.0..400.0))).unwrap();
        let est = Estimate::runtime(rng.random_range(10.0..400.0), EstimateMethod::Mean, 1, 0);
        history.record_estimate(id.clone(), est, now).unwrap();
        fabric.enqueue(&site, &id).unwrap();
    }
    fabric.advance(now + rng.random_range(0.0..300.0)).unwrap();
    QueueInstance { fabric, history, site }
}

/// Remaining work ahead of `probe`, summed in task-id order and divided by
/// the slot count. Running tasks count only while every slot is busy.
fn queue_oracle(q: &QueueInstance, probe: &TaskId) -> f64 {
    let views = q.fabric.tasks();
    let me = views.iter().find(|v| v.task.task_id == *probe).unwrap();
    if me.task.state != TaskState::Queued {
        return 0.0;
    }
    let here: Vec<_> = views
        .iter()
        .filter(|v| v.task.assigned_site.as_ref() == Some(&q.site) && !v.task.state.is_terminal())
        .collect();
    let slots = q.fabric.site(&q.site).unwrap().cpu_slots;
    let running = here.iter().filter(|v| v.task.state == TaskState::Running).count() as u32;
    let key = |t: &Task| (-t.attributes.priority, t.submit_time.unwrap(), t.task_id.as_str().to_string());
    let mine = key(&me.task);
    let mut ahead: Vec<(String, f64)> = Vec::new();
    for v in &here {
        let counts = match v.task.state {
            TaskState::Queued => {
                let k = key(&v.task);
                k.0 < mine.0 || (k.0 == mine.0 && (k.1 < mine.1 || (k.1 == mine.1 && k.2 < mine.2)))
            }
            TaskState::Running => running == slots,
            _ => false,
        };
        if counts {
            let est = q.history.lookup_estimate(&v.task.task_id).unwrap().value;
            ahead.push((v.task.task_id.as_str().to_string(), (est - v.task.wall_clock_accumulated).max(0.0)));
        }
    }
    ahead.sort_by(|a, b| a.0.cmp(&b.0));
    let mut total = 0.0;
    for (_, r) in ahead {
        total += r;
    }
    total / slots as f64
}

#[test]
fn queue_estimator_oracle() {
    criterion("queue estimator oracle", Duration::from_secs(5), || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b9);
        let (mut single, mut multi, mut queued) = (0, 0, 0);
        for i in 0..1000 {
            let slots = if i % 2 == 0 { 1 } else { rng.random_range(2..=4) };
            let q = queue_instance(&mut rng, slots);
            if slots == 1 {
                single += 1;
            } else {
                multi += 1;
            }
            let views = q.fabric.tasks();
            let probe = &views[rng.random_range(0..views.len())].task;
            if probe.state == TaskState::Queued {
                queued += 1;
            }
            let got = estimate_queue_time(&q.fabric, &q.history, &q.site, &probe.task_id)
                .map_err(|e| format!("instance {i}: {e}"))?;
            let want = queue_oracle(&q, &probe.task_id);
            ensure(got.value.to_bits() == want.to_bits(), || {
                format!("instance {i} ({slots} slots, {}): {} vs oracle {want}", probe.task_id, got.value)
            })?;
        }
        Ok(format!("1000 instances bit-equal ({single} single-slot, {multi} multi-slot, {queued} queued probes)"))
    });
}

// ---- transfer estimator ----------------------------------------------------------

#[test]
fn transfer_estimator_round_trip() {
    criterion("transfer estimator", Duration::from_secs(5), || {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut worst = 0.0f64;
        for i in 0..100 {
            let bytes: u64 = rng.random_range(0..1_000_000_000_000);
            let bw: f64 = rng.random_range(1.0..1e10);
            let mut f = Fabric::new();
            f.add_site(SiteSpec::new("A", 1)).unwrap();
            f.add_site(SiteSpec::new("B", 1)).unwrap();
            f.add_link(SiteId::new("A"), SiteId::new("B"), bw).unwrap();
            let e = gridhelm_core::estimators::estimate_transfer_time(&f, &SiteId::new("A"), &SiteId::new("B"), bytes)
                .map_err(|e| e.to_string())?;
            let size = bytes as f64;
            let ulp = size.next_up() - size;
            let off = (e.value * bw - size).abs();
            worst = worst.max(if ulp > 0.0 { off / ulp } else { off });
            ensure(off <= ulp, || format!("pair {i}: {} x {bw} = {} for {bytes} bytes", e.value, e.value * bw))?;
        }
        Ok(format!("100 pairs, worst |t*bw - bytes| = {worst:.2} ulp"))
    });
}

// ---- migration -------------------------------------------------------------------

#[test]
fn migration_scenario() {
    criterion("migration scenario", Duration::from_secs(5), || {
        let rep = migration_experiment(None, true).map_err(|e| e.to_string())?;
        let again = migration_experiment(None, true).map_err(|e| e.to_string())?;
        ensure(rep == again, || "two runs differ".into())?;
        ensure(rep.reference_completion == Some(283.0), || format!("reference at {:?}", rep.reference_completion))?;
        let at_282 = rep.rows.iter().find(|r| r.t == 282.0).ok_or("no row at t=282")?;
        ensure(rep.accrued_at_decision == Some(141.0) && rep.decision_time == Some(282.0), || {
            format!("decision at {:?} with {:?} accrued", rep.decision_time, rep.accrued_at_decision)
        })?;
        ensure(at_282.stay_put == 100.0 * 141.0 / 283.0, || format!("stay-put at 282 is {}%", at_282.stay_put))?;
        let stay = rep.stay_put_completion.ok_or("stay-put never completes")?;
        let moved = rep.migrated_completion.ok_or("migrated never completes")?;
        let ck = rep.checkpointed_completion.ok_or("checkpointed never completes")?;
        ensure(moved < stay, || format!("migrated {moved} not before stay-put {stay}"))?;
        ensure(ck < moved, || format!("checkpointed {ck} not before migrated {moved}"))?;
        Ok(format!(
            "reference 283, 141 s accrued at t=282 ({:.2}%), checkpointed {ck} < migrated {moved} < stay-put {stay}, deterministic",
            at_282.stay_put
        ))
    });
}

// ---- load ------------------------------------------------------------------------

#[test]
fn concurrent_load() {
    criterion("concurrent load", Duration::from_secs(60), || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| e.to_string())?;
        let rows = rt.block_on(load::run_in_process(&[1, 5, 10, 25, 50], 100)).map_err(|e| e.to_string())?;
        let issues = load::self_check(&rows, &[1, 5, 10, 25, 50]);
        ensure(issues.is_empty(), || issues.join("; "))?;
        let base = rows[0].mean_ms;
        let top = rows[4].p95_ms;
        let ratio = top / base;
        let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        let detail = format!(
            "0 failures; N=1 mean {base:.4} ms, N=50 p95 {top:.4} ms, ratio {ratio:.1} (limit 20) on {cores} CPU(s)"
        );
        ensure(top <= 20.0 * base, || detail.clone())?;
        Ok(detail)
    });
}

// ---- lifecycle -------------------------------------------------------------------

const STATES: [TaskState; 8] = [
    TaskState::Planned,
    TaskState::Queued,
    TaskState::Running,
    TaskState::Paused,
    TaskState::Moving,
    TaskState::Completed,
    TaskState::Failed,
    TaskState::Killed,
];

fn allowed(from: TaskState, to: TaskState) -> bool {
    use TaskState::*;
    matches!(
        (from, to),
        (Planned, Queued | Killed)
            | (Queued, Running | Moving | Killed)
            | (Running, Completed | Failed | Killed | Paused | Moving)
            | (Paused, Running | Moving | Killed)
            | (Moving, Queued | Killed)
    )
}

fn state_machine(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let mut steps = 0;
    for walk in 0..500 {
        let mut t = Task::new(TaskId::new("t"), JobId::new("j"), attrs(0));
        for k in 0..30 {
            let to = STATES[rng.random_range(0..STATES.len())];
            let from = t.state;
            steps += 1;
            match transition(t.clone(), to, (k + 1) as f64) {
                Ok(next) => {
                    ensure(allowed(from, to), || format!("walk {walk}: {from} -> {to} accepted"))?;
                    ensure(next.state == to, || format!("walk {walk}: landed in {}", next.state))?;
                    ensure(next.wall_clock_accumulated >= t.wall_clock_accumulated, || {
                        format!("walk {walk}: accrual went down on {from} -> {to}")
                    })?;
                    t = next;
                }
                Err(_) => ensure(!allowed(from, to), || format!("walk {walk}: {from} -> {to} refused"))?,
            }
        }
    }
    Ok(steps)
}

fn migration_conservation(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let cases = 200;
    for case in 0..cases {
        let run_for = rng.random_range(1..500) as f64;
        let load = rng.random_range(0..4) as f64 * 0.5;
        let checkpointable = rng.random_bool(0.5);
        let input = rng.random_range(0..50u64) * 1_000_000;
        let mut f = Fabric::new();
        f.add_site(SiteSpec::new("A", 1).load(load)).unwrap();
        f.add_site(SiteSpec::new("B", 1)).unwrap();
        f.add_link(SiteId::new("A"), SiteId::new("B"), 1e7).unwrap();
        let id = TaskId::new("t");
        let task = Task::new(id.clone(), JobId::new("j"), attrs(0)).checkpointable(checkpointable);
        f.admit(task, SimParams::runtime(10_000.0)).map_err(|e| e.to_string())?;
        f.relocate(&id, &SiteId::new("A"), None, &[]).map_err(|e| e.to_string())?;
        f.advance(run_for).map_err(|e| e.to_string())?;
        let before = f.task(&id).unwrap().task.wall_clock_accumulated;
        let ex = f.extract_task(&SiteId::new("A"), &id).map_err(|e| e.to_string())?;
        let expected_ck = if checkpointable { Some(before) } else { None };
        ensure(ex.checkpoint == expected_ck, || format!("case {case}: checkpoint {:?}", ex.checkpoint))?;
        let legs = [TransferLeg { from: SiteId::new("A"), bytes: input }];
        let ticket = f.relocate(&id, &SiteId::new("B"), ex.checkpoint, &legs).map_err(|e| e.to_string())?;
        ensure(ticket.completes_at == run_for + input as f64 / 1e7, || format!("case {case}: staging ends {}", ticket.completes_at))?;
        f.advance(ticket.completes_at).map_err(|e| e.to_string())?;
        let v = f.task(&id).unwrap();
        let restart = if checkpointable { before } else { 0.0 };
        ensure(
            v.task.state == TaskState::Running
                && v.task.assigned_site == Some(SiteId::new("B"))
                && v.task.wall_clock_accumulated == restart,
            || format!("case {case}: {} at {:?} with {}", v.task.state, v.task.assigned_site, v.task.wall_clock_accumulated),
        )?;
    }
    Ok(cases)
}

fn fault_scenario(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = String::new();
    let sites: Vec<String> = (0..rng.random_range(3..=4)).map(|i| format!("S{i}")).collect();
    for id in &sites {
        let load = rng.random_range(0..=4) as f64 * 0.25;
        let _ = writeln!(s, "site {id} slots={} load={load} cost={}", rng.random_range(1..=3), rng.random_range(1..=3));
    }
    for (i, a) in sites.iter().enumerate() {
        for b in &sites[i + 1..] {
            let _ = writeln!(s, "link {a} {b} bandwidth={}MB", rng.random_range(5..=100));
        }
    }
    for q in ["short", "long"] {
        for h in [1, 2] {
            let _ = writeln!(s, "record user=u queue={q} cpu_hours={h} runtime={}", 40 * h);
        }
    }
    let mut n = 0;
    for j in 0..rng.random_range(2..=4) {
        let submit = rng.random_range(0..40);
        let mut prev: Option<String> = None;
        for _ in 0..rng.random_range(1..=4) {
            n += 1;
            let id = format!("t{n}");
            let q = if rng.random_bool(0.5) { "short" } else { "long" };
            let runtime = rng.random_range(10..150);
            let home = &sites[rng.random_range(0..sites.len())];
            let fails = if rng.random_bool(0.1) { format!(" fails_at={}", runtime / 2) } else { String::new() };
            let _ = writeln!(
                s,
                "task {id} job=j{j} user=u queue={q} cpu_hours={} runtime={runtime} submit={submit} checkpointable={} inputs=in:{}MB@{home} output=1MB priority={}{fails}",
                rng.random_range(1..=2),
                rng.random_bool(0.4),
                rng.random_range(0..20),
                rng.random_range(0..3),
            );
            if let Some(p) = prev.as_ref() {
                if rng.random_bool(0.5) {
                    let _ = writeln!(s, "edge j{j} {p} {id}");
                }
            }
            prev = Some(id);
        }
    }
    for _ in 0..rng.random_range(1..=3) {
        let site = &sites[rng.random_range(0..sites.len())];
        let at = rng.random_range(5..200) as f64 + 0.5;
        let _ = writeln!(s, "fault fail {site} at={at}");
        if rng.random_bool(0.6) {
            let _ = writeln!(s, "fault recover {site} at={}", at + rng.random_range(2..80) as f64);
        }
    }
    let objective = if rng.random_bool(0.5) { "fast" } else { "cheap" };
    let _ = writeln!(s, "policy objective={objective} interval={}", rng.random_range(5..30));
    let _ = writeln!(s, "run until=3000");
    s
}

/// Every task of the scenario is terminal, in flight with no site, or
/// resident at exactly one live site that matches its assignment.
fn no_lost_tasks(seed: u64, sc: &Scenario, g: &Grid) -> Result<(), String> {
    ensure(g.rejected().is_empty(), || format!("seed {seed}: rejected {:?}", g.rejected()))?;
    let sites = g.fabric.sites();
    let ids: BTreeSet<TaskId> = sc.tasks.iter().map(|t| t.task.task_id.clone()).collect();
    for id in &ids {
        let v = g.fabric.task(id).ok_or_else(|| format!("seed {seed}: {id} vanished"))?;
        match v.task.state {
            s if s.is_terminal() => {}
            TaskState::Moving => ensure(v.task.assigned_site.is_none(), || format!("seed {seed}: {id} moving but assigned"))?,
            _ => {
                let homes: Vec<_> = sites.iter().filter(|s| s.resident().any(|r| r.task.task_id == *id)).collect();
                ensure(homes.len() == 1, || format!("seed {seed}: {id} resident at {} sites", homes.len()))?;
                ensure(homes[0].alive, || format!("seed {seed}: {id} left on dead site {}", homes[0].site_id))?;
                ensure(v.task.assigned_site.as_ref() == Some(&homes[0].site_id), || format!("seed {seed}: {id} misassigned"))?;
            }
        }
    }
    Ok(())
}

#[test]
fn steering_lifecycle_suite() {
    criterion("steering lifecycle suite", Duration::from_secs(30), || {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let steps = state_machine(&mut rng)?;
        for from in [TaskState::Completed, TaskState::Failed, TaskState::Killed] {
            for to in STATES {
                let mut t = Task::new(TaskId::new("t"), JobId::new("j"), attrs(0));
                t.state = from;
                ensure(transition(t, to, 1.0).is_err(), || format!("terminal {from} -> {to} accepted"))?;
            }
        }
        let moves = migration_conservation(&mut rng)?;
        let mut replayed_commands = 0;
        for seed in 0..50u64 {
            let text = fault_scenario(seed);
            let sc = Scenario::parse(&text, None).map_err(|e| format!("seed {seed}: {e}"))?;
            let (g, replay) = run_and_replay(&sc).map_err(|e| format!("seed {seed}: {e}"))?;
            no_lost_tasks(seed, &sc, &g)?;
            ensure(g.task_states() == replay.task_states(), || format!("seed {seed}: replay states differ"))?;
            ensure(g.fabric.event_log_csv() == replay.fabric.event_log_csv(), || format!("seed {seed}: replay event log differs"))?;
            replayed_commands += g.steering.audit.records().iter().filter(|r| r.verb.is_command()).count();
        }
        Ok(format!(
            "{steps} transitions checked, {moves} moves conserve or restart progress, 50 fault scenarios lose nothing, \
             replay equal ({replayed_commands} audited commands)"
        ))
    });
}

// ---- recovery --------------------------------------------------------------------

const FAULTY: &str = "\
site A slots=2 load=0 heartbeat=1
site B slots=2 load=0 heartbeat=1
site C slots=1 load=0.5 heartbeat=2
link A B bandwidth=100MB
link A C bandwidth=100MB
link B C bandwidth=100MB
record user=u queue=q cpu_hours=1 runtime=100
task a1 job=ja user=u queue=q runtime=100 checkpointable=true
task a2 job=ja user=u queue=q runtime=120
task a3 job=ja user=u queue=q runtime=80 inputs=x:5MB@B
task a4 job=ja user=u queue=q runtime=60
task a5 job=ja user=u queue=q runtime=60
task b1 job=jb user=u queue=q runtime=100
plan ja a1=A a2=A a3=A a4=A a5=A
plan jb b1=B
policy enabled=false
fault fail A at=30.5
run until=1000
";

#[test]
fn heartbeat_recovery() {
    criterion("heartbeat recovery", Duration::from_secs(5), || {
        let sc = Scenario::parse(FAULTY, None).map_err(|e| e.to_string())?;
        let mut g = Grid::from_scenario(&sc, None).map_err(|e| e.to_string())?;
        // beats at whole seconds; the last one before 30.5 is at 30
        let detect = 30.0 + MISSED_HEARTBEAT_LIMIT as f64;
        g.run_until(detect - 1.0).map_err(|e| e.to_string())?;
        ensure(g.steering.failed_sites().is_empty(), || "site declared failed too early".into())?;
        let stranded: BTreeSet<String> =
            g.fabric.resident_ids(&SiteId::new("A")).unwrap().iter().map(|t| t.to_string()).collect();
        let before = g.steering.audit.records().len();
        g.run_until(detect).map_err(|e| e.to_string())?;
        let new = &g.steering.audit.records()[before..];
        ensure(new.iter().any(|r| r.verb == Verb::SiteFailed && r.target == "A"), || format!("A not declared failed at {detect}"))?;
        let resubmitted: BTreeSet<String> =
            new.iter().filter(|r| r.verb == Verb::Resubmit && r.succeeded()).map(|r| r.target.clone()).collect();
        ensure(resubmitted == stranded, || format!("resubmitted {resubmitted:?}, stranded {stranded:?}"))?;
        ensure(g.fabric.resident_ids(&SiteId::new("A")).unwrap().is_empty(), || "tasks left at A".into())?;
        g.run_until(1000.0).map_err(|e| e.to_string())?;
        let unfinished: Vec<_> = g.task_states().into_iter().filter(|(_, s, _)| *s != TaskState::Completed).collect();
        ensure(unfinished.is_empty(), || format!("unfinished {unfinished:?}"))?;
        Ok(format!(
            "{} tasks resubmitted in the tick at t={detect} that declared A failed; all tasks complete",
            resubmitted.len()
        ))
    });
}
