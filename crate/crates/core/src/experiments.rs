//! Deterministic experiment harnesses: runtime-estimate accuracy over
//! synthetic traces, and the two-site migration timeline.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::GridError;
use crate::estimators::{evaluate_records, EstimatorError, EvaluationReport};
use crate::grid::{Grid, GridResult};
use crate::history::HistoryStore;
use crate::model::{TaskId, VirtualTime};
use crate::scenario::Scenario;
use crate::steering::{Verb, SHADOW_SUFFIX};
use crate::trace::{generate, TraceConfig};

/// Evaluate the runtime estimator on one synthetic trace.
pub fn runtime_experiment(config: TraceConfig) -> Result<EvaluationReport, EstimatorError> {
    let trace = generate(config);
    let mut history = HistoryStore::in_memory();
    for rec in trace.history {
        history.add_record(rec)?;
    }
    evaluate_records(&history, &trace.test)
}

/// MAPE for each seed in `seeds`.
pub fn runtime_sweep(seeds: impl IntoIterator<Item = u64>, sigma: f64) -> Result<Vec<(u64, f64)>, EstimatorError> {
    seeds
        .into_iter()
        .map(|seed| runtime_experiment(TraceConfig::new(seed, sigma)).map(|r| (seed, r.mean_absolute_error)))
        .collect()
}

/// Task id used by the migration scenarios.
pub const MIGRATION_TASK: &str = "t1";

/// Site A carries load 1.0, site B is free. The job is pinned to A and the
/// optimizer looks at it once, after 282 s.
pub fn migration_scenario_text(checkpointable: bool, dual_run: bool) -> String {
    format!(
        "\
site A slots=1 load=1.0 cost=1
site B slots=1 load=0 cost=1
link A B bandwidth=100MB
record user=alice queue=short cpu_hours=1 runtime=283
task {MIGRATION_TASK} job=j1 user=alice queue=short cpu_hours=1 runtime=283 inputs=data:10MB@A output=5MB checkpointable={checkpointable}
plan j1 {MIGRATION_TASK}=A
policy objective=fast interval=282 threshold=1.5 enabled=true dual_run={dual_run}
run until=1200
"
    )
}

/// The same task alone on a free site.
pub fn reference_scenario_text() -> String {
    format!(
        "\
site R slots=1 load=0
record user=alice queue=short cpu_hours=1 runtime=283
task {MIGRATION_TASK} job=j1 user=alice queue=short cpu_hours=1 runtime=283 output=5MB
plan j1 {MIGRATION_TASK}=R
policy enabled=false
run until=1200
"
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimelineRow {
    pub t: VirtualTime,
    pub reference: f64,
    pub stay_put: f64,
    pub migrated: f64,
    pub migrated_checkpointed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MigrationReport {
    pub rows: Vec<TimelineRow>,
    pub reference_completion: Option<VirtualTime>,
    pub stay_put_completion: Option<VirtualTime>,
    pub migrated_completion: Option<VirtualTime>,
    pub checkpointed_completion: Option<VirtualTime>,
    /// When the optimizer moved the task, and how much it had accrued.
    pub decision_time: Option<VirtualTime>,
    pub accrued_at_decision: Option<f64>,
    /// Stay-put completion projected from the accrual law at the decision.
    pub projected_stay_put: Option<VirtualTime>,
    /// With dual-run the stay-put series is read from the original copy;
    /// this is its completion, which must match the stay-put run.
    pub dual_run_original_completion: Option<VirtualTime>,
}

impl MigrationReport {
    /// `t,reference,stay_put,migrated,migrated_checkpointed`, progress in
    /// percent of the reference runtime.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,reference,stay_put,migrated,migrated_checkpointed\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.4},{:.4},{:.4},{:.4}", r.t, r.reference, r.stay_put, r.migrated, r.migrated_checkpointed);
        }
        out
    }

    pub fn summary(&self) -> String {
        let f = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:.3}"));
        format!(
            "reference={} stay_put={} migrated={} migrated_checkpointed={} decision_at={} accrued_at_decision={}",
            f(self.reference_completion),
            f(self.stay_put_completion),
            f(self.migrated_completion),
            f(self.checkpointed_completion),
            f(self.decision_time),
            f(self.accrued_at_decision),
        )
    }

    /// Problems with the run's expected shape, empty when it looks right.
    pub fn self_check(&self) -> Vec<String> {
        let mut issues = Vec::new();
        let (Some(stay), Some(mig)) = (self.stay_put_completion, self.migrated_completion) else {
            issues.push("a series did not complete".to_string());
            return issues;
        };
        if mig >= stay {
            issues.push(format!("migrated completion {mig} is not before stay-put {stay}"));
        }
        if let Some(ck) = self.checkpointed_completion {
            if ck >= mig {
                issues.push(format!("checkpointed completion {ck} is not before migrated {mig}"));
            }
        }
        if let Some(orig) = self.dual_run_original_completion {
            if orig != stay {
                issues.push(format!("dual-run original completed at {orig}, stay-put run at {stay}"));
            }
        }
        issues
    }
}

struct Series {
    samples: Vec<(VirtualTime, f64)>,
    completion: Option<VirtualTime>,
    decision: Option<VirtualTime>,
    original_completion: Option<VirtualTime>,
}

/// Run a scenario, sampling the accrued time of the job (following it onto
/// its migrated copy) at each time in `times`.
fn sample(sc: &Scenario, times: &[VirtualTime]) -> GridResult<Series> {
    let id = TaskId::new(MIGRATION_TASK);
    let shadow = TaskId::new(format!("{MIGRATION_TASK}{SHADOW_SUFFIX}"));
    let mut grid = Grid::from_scenario(sc, None)?;
    let mut samples = Vec::with_capacity(times.len());
    let mut decision = None;
    let mut decision_seen = 0;
    for &t in times {
        grid.run_until(t)?;
        let records = grid.steering.audit.records();
        if decision.is_none() {
            if let Some(r) = records[decision_seen..].iter().find(|r| matches!(r.verb, Verb::Move(_)) && r.succeeded()) {
                decision = Some(r.time);
            }
            decision_seen = records.len();
        }
        let follow = if grid.fabric.has_task(&shadow) { &shadow } else { &id };
        let accrued = grid.fabric.task(follow).map_or(0.0, |v| v.task.wall_clock_accumulated);
        samples.push((t, accrued));
    }
    let follow = if grid.fabric.has_task(&shadow) { &shadow } else { &id };
    let completion = grid.fabric.task(follow).and_then(|v| v.task.completion_time);
    let original_completion = grid.fabric.has_task(&shadow).then(|| grid.fabric.task(&id).and_then(|v| v.task.completion_time)).flatten();
    Ok(Series { samples, completion, decision, original_completion })
}

/// Accrued time of the job in `sc` at exactly `at`.
fn accrued_at(sc: &Scenario, at: VirtualTime) -> GridResult<f64> {
    let mut grid = Grid::from_scenario(sc, None)?;
    grid.run_until(at)?;
    Ok(grid.fabric.task(&TaskId::new(MIGRATION_TASK)).map_or(0.0, |v| v.task.wall_clock_accumulated))
}

fn parse(text: &str) -> GridResult<Scenario> {
    Scenario::parse(text, None).map_err(GridError::from)
}

/// The migration experiment: reference run on a free site, the job left
/// on loaded site A, the job moved by the optimizer, and the same move
/// for a checkpointable job. `scenario` overrides the moved run.
pub fn migration_experiment(scenario: Option<&Scenario>, dual_run: bool) -> GridResult<MigrationReport> {
    let reference = parse(&reference_scenario_text())?;
    let moved = match scenario {
        Some(sc) => {
            let mut sc = sc.clone();
            sc.dual_run = dual_run;
            sc
        }
        None => parse(&migration_scenario_text(false, dual_run))?,
    };
    let mut checkpointed = moved.clone();
    for t in &mut checkpointed.tasks {
        t.task.checkpointable = true;
    }
    let mut stay = moved.clone();
    let mut policy = stay.policy.unwrap_or_default();
    policy.enabled = false;
    stay.policy = Some(policy);
    stay.dual_run = false;

    let horizon = moved.run_until.unwrap_or(1200.0).max(1.0);
    let times: Vec<f64> = (0..=horizon as u64).map(|s| s as f64).collect();
    let r = sample(&reference, &times)?;
    let s = sample(&stay, &times)?;
    let m = sample(&moved, &times)?;
    let c = sample(&checkpointed, &times)?;

    let total = {
        let mut g = Grid::from_scenario(&reference, None)?;
        g.run_until(horizon)?;
        g.fabric.task(&TaskId::new(MIGRATION_TASK)).map_or(1.0, |v| v.task.wall_clock_accumulated)
    };
    let pct = |v: f64| 100.0 * v / total;
    let rows = times
        .iter()
        .enumerate()
        .map(|(i, &t)| TimelineRow {
            t,
            reference: pct(r.samples[i].1),
            stay_put: pct(s.samples[i].1),
            migrated: pct(m.samples[i].1),
            migrated_checkpointed: pct(c.samples[i].1),
        })
        .collect();

    let decision_time = m.decision;
    let accrued_at_decision = match decision_time {
        Some(t) => Some(accrued_at(&stay, t)?),
        None => None,
    };
    let projected_stay_put = match (decision_time, accrued_at_decision) {
        (Some(t), Some(a)) => {
            let id = TaskId::new(MIGRATION_TASK);
            let load = moved
                .plans
                .values()
                .find_map(|p| p.get(&id))
                .and_then(|site| moved.sites.iter().find(|s| s.site_id == *site))
                .map_or(0.0, |s| s.load_factor);
            let runtime = moved.tasks.iter().find(|t| t.task.task_id == id).map(|t| t.params.true_runtime);
            runtime.map(|rt| t + (rt - a) * (1.0 + load))
        }
        _ => None,
    };
    Ok(MigrationReport {
        rows,
        reference_completion: r.completion,
        stay_put_completion: s.completion,
        migrated_completion: m.completion,
        checkpointed_completion: c.completion,
        decision_time,
        accrued_at_decision,
        projected_stay_put,
        dual_run_original_completion: m.original_completion,
    })
}

/// Run a scenario with the optimizer on, then replay its audit log on a
/// fresh grid; returns both grids.
pub fn run_and_replay(sc: &Scenario) -> GridResult<(Grid, Grid)> {
    let mut grid = Grid::from_scenario(sc, None)?;
    grid.run_until(sc.run_until.unwrap_or(0.0))?;
    let replayed = Grid::replay(sc, grid.steering.audit.records())?;
    Ok((grid, replayed))
}
