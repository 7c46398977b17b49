//! Deterministic fault suite for heartbeat-based recovery.

use std::collections::{BTreeMap, BTreeSet};

use gridhelm_core::grid::Grid;
use gridhelm_core::model::{SiteId, TaskId, TaskState};
use gridhelm_core::scenario::Scenario;
use gridhelm_core::steering::{Ctx, Verb, MISSED_HEARTBEAT_LIMIT};

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

/// First recovery tick (on the one-second grid) at which the site has
/// missed the heartbeat limit, computed from the last beat before the
/// failure.
fn detection_time(fail_at: f64, interval: f64) -> f64 {
    let last_beat = (fail_at / interval).floor() * interval;
    let mut t = fail_at.ceil();
    while ((t - last_beat) / interval).floor() < MISSED_HEARTBEAT_LIMIT as f64 {
        t += 1.0;
    }
    t
}

fn resident_at(g: &Grid, site: &str) -> BTreeSet<TaskId> {
    g.fabric.resident_ids(&SiteId::new(site)).unwrap().into_iter().collect()
}

#[test]
fn failed_site_tasks_resubmitted_within_one_tick() {
    let sc = Scenario::parse(FAULTY, None).unwrap();
    let mut g = Grid::from_scenario(&sc, None).unwrap();
    let detect = detection_time(30.5, 1.0);
    assert_eq!(detect, 33.0);

    g.run_until(detect - 1.0).unwrap();
    let stranded = resident_at(&g, "A");
    assert_eq!(stranded.len(), 5, "all of job ja sits at A");
    assert!(!g.fabric.site(&SiteId::new("A")).unwrap().alive);
    assert!(g.steering.failed_sites().is_empty(), "not declared before the limit");
    let before = g.steering.audit.records().len();

    g.run_until(detect).unwrap();
    let new = &g.steering.audit.records()[before..];
    assert!(new.iter().any(|r| r.verb == Verb::SiteFailed && r.target == "A" && r.time == detect));
    let resubmitted: BTreeMap<String, SiteId> = new
        .iter()
        .filter(|r| r.verb == Verb::Resubmit && r.succeeded())
        .map(|r| (r.target.clone(), r.site.clone().unwrap()))
        .collect();
    let expected: BTreeSet<String> = stranded.iter().map(|t| t.to_string()).collect();
    assert_eq!(resubmitted.keys().cloned().collect::<BTreeSet<_>>(), expected);
    for (id, site) in &resubmitted {
        assert_ne!(site.as_str(), "A");
        let v = g.fabric.task(&TaskId::new(id.as_str())).unwrap();
        let placed = v.in_transit_to.as_ref() == Some(site) || v.task.assigned_site.as_ref() == Some(site);
        assert!(placed, "{id} not on its way to {site}: {:?}", v.task.state);
        // restarts lose progress unless checkpointing was possible; an
        // abandoned task has nowhere to take a checkpoint from
        assert_eq!(v.task.wall_clock_accumulated, 0.0);
    }
    assert!(resident_at(&g, "A").is_empty());

    g.run_until(1000.0).unwrap();
    for (id, st, _) in g.task_states() {
        assert_eq!(st, TaskState::Completed, "{id}");
    }
}

#[test]
fn one_recovery_tick_is_enough() {
    // Drive the services by hand: fail at 30.5, advance to detection,
    // then a single tick must evacuate everything.
    let mut sc = Scenario::parse(FAULTY, None).unwrap();
    sc.faults.clear();
    let mut g = Grid::from_scenario(&sc, None).unwrap();
    g.run_until(30.5).unwrap();
    g.fabric.fail_site(&SiteId::new("A")).unwrap();
    let stranded = resident_at(&g, "A");
    assert!(!stranded.is_empty());
    g.fabric.advance(33.0).unwrap();
    let mut ctx = Ctx { fabric: &mut g.fabric, history: &mut g.history, scheduler: &g.scheduler };
    let records = g.steering.recovery_tick(&mut ctx);
    let moved: BTreeSet<TaskId> = records
        .iter()
        .filter(|r| r.verb == Verb::Resubmit && r.succeeded())
        .map(|r| TaskId::new(r.target.as_str()))
        .collect();
    assert_eq!(moved, stranded);
    assert!(g.steering.parked().is_empty());
}

#[test]
fn slow_heartbeat_site_waits_longer() {
    let text = FAULTY.replace("fault fail A at=30.5", "fault fail C at=30.5").replace("plan jb b1=B", "plan jb b1=C");
    let sc = Scenario::parse(&text, None).unwrap();
    let mut g = Grid::from_scenario(&sc, None).unwrap();
    let detect = detection_time(30.5, 2.0);
    assert_eq!(detect, 36.0);
    g.run_until(detect - 1.0).unwrap();
    assert!(g.steering.failed_sites().is_empty());
    g.run_until(detect).unwrap();
    assert!(g.steering.failed_sites().contains(&SiteId::new("C")));
    let r = g.steering.audit.records().iter().find(|r| r.verb == Verb::Resubmit).unwrap();
    assert_eq!((r.target.as_str(), r.time), ("b1", detect));
}

#[test]
fn no_alive_site_parks_until_recovery() {
    let text = "\
site A slots=1 heartbeat=1
site B slots=1 heartbeat=1
link A B bandwidth=10MB
record user=u queue=q cpu_hours=1 runtime=50
task t1 job=j user=u queue=q runtime=50
plan j t1=A
policy enabled=false
fault fail A at=10.5
fault fail B at=10.5
fault recover B at=40
run until=200
";
    let sc = Scenario::parse(text, None).unwrap();
    let mut g = Grid::from_scenario(&sc, None).unwrap();
    g.run_until(39.0).unwrap();
    let id = TaskId::new("t1");
    assert_eq!(g.fabric.state_of(&id), Some(TaskState::Moving));
    assert!(g.steering.parked().contains(&id));
    let parks = g.steering.audit.records().iter().filter(|r| r.verb == Verb::Park).count();
    assert_eq!(parks, 1, "parking is logged once");
    g.run_until(200.0).unwrap();
    let t = g.fabric.task(&id).unwrap().task;
    assert_eq!(t.state, TaskState::Completed);
    assert_eq!(t.assigned_site, Some(SiteId::new("B")));
    assert_eq!(t.completion_time, Some(40.0 + 50.0));
}

#[test]
fn failure_on_live_site_notifies_without_retry() {
    let text = "\
site A slots=1
record user=u queue=q cpu_hours=1 runtime=50
task t1 job=j user=u queue=q runtime=50 fails_at=20 output=3MB
task t2 job=j user=u queue=q runtime=10
edge j t1 t2
plan j t1=A t2=A
policy enabled=false
run until=100
";
    let sc = Scenario::parse(text, None).unwrap();
    let mut g = Grid::from_scenario(&sc, None).unwrap();
    g.run_until(100.0).unwrap();
    let t1 = g.fabric.task(&TaskId::new("t1")).unwrap().task;
    assert_eq!(t1.state, TaskState::Failed);
    assert_eq!(g.fabric.state_of(&TaskId::new("t2")), Some(TaskState::Killed));
    let n = g.steering.notifications();
    assert_eq!(n.len(), 1);
    assert_eq!(n[0].task_id, TaskId::new("t1"));
    let pkg = g
        .steering
        .download_state(gridhelm_core::steering::Actor::Internal("test"), &TaskId::new("t1"), 100.0)
        .unwrap();
    assert_eq!(pkg.files.iter().map(|f| f.size_bytes).sum::<u64>(), 3_000_000);
    assert!(pkg.execution_state.is_none());
    assert!(!g.steering.audit.records().iter().any(|r| r.verb == Verb::Resubmit));
}
