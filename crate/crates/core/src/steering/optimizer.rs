//! Periodic check of running tasks: a task progressing too slowly is moved
//! when some other site would finish it sooner (or cheaper) than staying.

use serde::{Deserialize, Serialize};

use super::{legs_time, migration_legs, AuditRecord, Ctx, MoveTarget, ScoreRow, Steering, SteeringError, SteeringResult, Verb};
use crate::estimators::{estimate_queue_time_hypothetical, estimate_runtime, QueueProbe};
use crate::fabric::TaskView;
use crate::model::SiteId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Cheap,
    Fast,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerPolicy {
    pub objective: Objective,
    pub check_interval: f64,
    pub slowdown_threshold: f64,
    pub enabled: bool,
}

impl Default for OptimizerPolicy {
    fn default() -> Self {
        Self { objective: Objective::Fast, check_interval: 10.0, slowdown_threshold: 1.5, enabled: true }
    }
}

impl OptimizerPolicy {
    pub fn validate(&self) -> SteeringResult<()> {
        if !(self.slowdown_threshold > 1.0) {
            return Err(SteeringError::InvalidPolicy("slowdown_threshold must exceed 1".into()));
        }
        if !(self.check_interval > 0.0) || !self.check_interval.is_finite() {
            return Err(SteeringError::InvalidPolicy("check_interval must be positive".into()));
        }
        Ok(())
    }
}

struct Candidate {
    site: SiteId,
    score: f64,
    cost_rate: f64,
}

impl Steering {
    /// Examine every running task on a watched site and move the ones that
    /// have a better site. Returns the audit records written.
    pub fn optimizer_tick(&mut self, ctx: &mut Ctx<'_>) -> Vec<AuditRecord> {
        if !self.policy.enabled {
            return Vec::new();
        }
        let start = self.audit.records().len();
        let now = ctx.fabric.now();
        let mut running: Vec<TaskView> = Vec::new();
        for site in self.watch.clone() {
            let Ok(snap) = ctx.fabric.site(&site) else { continue };
            if snap.alive {
                running.extend(snap.running);
            }
        }
        running.sort_by(|a, b| a.task.task_id.cmp(&b.task.task_id));
        for view in running {
            let id = view.task.task_id.clone();
            if self.shadows.contains_key(&id) || self.is_shadow(&id) {
                continue;
            }
            let Some((t0, a0)) = view.segment_start else { continue };
            let elapsed = now - t0;
            if elapsed <= 0.0 {
                continue;
            }
            let accrued = view.task.wall_clock_accumulated;
            let rate = (accrued - a0) / elapsed;
            if rate >= 1.0 / self.policy.slowdown_threshold {
                continue;
            }
            self.evaluate(ctx, &view, rate);
        }
        self.audit.records()[start..].to_vec()
    }

    fn evaluate(&mut self, ctx: &mut Ctx<'_>, view: &TaskView, rate: f64) {
        let now = ctx.fabric.now();
        let id = &view.task.task_id;
        let source = view.task.assigned_site.clone().expect("running tasks have a site");
        let estimate = ctx
            .history
            .lookup_estimate(id)
            .or(view.task.submitted_estimate)
            .map(|e| e.value)
            .or_else(|| estimate_runtime(ctx.history, &view.task.attributes).ok().map(|e| e.value));
        let Some(estimate) = estimate else {
            self.log(now, "optimizer", Verb::Evaluate, id.to_string(), &Err(SteeringError::InvalidCommand("no runtime estimate".into())));
            return;
        };
        let accrued = view.task.wall_clock_accumulated;
        let left_here = (estimate - accrued).max(0.0);
        let keeps_progress = view.task.checkpointable && accrued > 0.0;
        let left_there = if keeps_progress { left_here } else { estimate.max(0.0) };
        let source_rate = self.accounting.cost_rate(&source).unwrap_or(0.0);
        let stay = match self.policy.objective {
            super::Objective::Fast if rate > 0.0 => left_here / rate,
            super::Objective::Fast => f64::INFINITY,
            super::Objective::Cheap => source_rate * left_here,
        };
        let mut rows = vec![ScoreRow { site_id: source.clone(), score: stay }];
        let mut best: Option<Candidate> = None;
        for snap in ctx.fabric.sites() {
            if !snap.alive || snap.site_id == source || self.failed_sites.contains(&snap.site_id) {
                continue;
            }
            let cost_rate = self.accounting.cost_rate(&snap.site_id).unwrap_or(snap.cost_rate);
            let score = match self.policy.objective {
                super::Objective::Fast => {
                    let probe = QueueProbe {
                        task_id: id.clone(),
                        priority: view.task.attributes.priority,
                        submit_time: view.task.submit_time.unwrap_or(now),
                    };
                    let Ok(queue) = estimate_queue_time_hypothetical(ctx.fabric, ctx.history, &snap.site_id, &probe) else {
                        continue;
                    };
                    let legs = migration_legs(view, Some(&source), &snap.site_id);
                    let Ok(transfer) = legs_time(ctx.fabric, &legs, &snap.site_id) else { continue };
                    queue.value + left_there * (1.0 + snap.load_factor) + transfer
                }
                super::Objective::Cheap => cost_rate * left_there,
            };
            rows.push(ScoreRow { site_id: snap.site_id.clone(), score });
            let better = match &best {
                None => true,
                Some(b) => {
                    score.total_cmp(&b.score).then(cost_rate.total_cmp(&b.cost_rate)).then_with(|| snap.site_id.cmp(&b.site))
                        == std::cmp::Ordering::Less
                }
            };
            if better {
                best = Some(Candidate { site: snap.site_id.clone(), score, cost_rate });
            }
        }
        match best {
            Some(b) if b.score < stay => {
                // the record written by apply carries the score table
                let _ = self.apply(ctx, "optimizer", id, &Verb::Move(MoveTarget::Site(b.site)), Some(rows));
            }
            _ => {
                self.audit.push(AuditRecord {
                    time: now,
                    session: "optimizer".into(),
                    verb: Verb::Evaluate,
                    target: id.to_string(),
                    outcome: "stay".into(),
                    site: None,
                    scores: Some(rows),
                });
            }
        }
    }
}
