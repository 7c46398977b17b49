//! Heartbeat-based failure detection, resubmission of stranded tasks, and
//! owner notifications for finished tasks.

use serde::Serialize;

use super::{migration_legs, AuditRecord, Ctx, Steering, SteeringError, Verb};
use crate::fabric::{LocalFile, Observed};
use crate::model::{SiteId, Task, TaskId, TaskState, VirtualTime};
use crate::scheduler::SchedulerError;

/// A watched site is declared failed after this many missed heartbeats.
pub const MISSED_HEARTBEAT_LIMIT: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NotificationKind {
    Failed,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Notification {
    pub at: VirtualTime,
    pub owner: String,
    pub task_id: TaskId,
    pub kind: NotificationKind,
}

/// What a user can fetch for a finished task: the staged local files, and
/// for completed tasks the final execution state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DownloadPackage {
    pub task_id: TaskId,
    pub status: TaskState,
    pub staged_at: VirtualTime,
    pub site_id: Option<SiteId>,
    pub files: Vec<LocalFile>,
    pub execution_state: Option<Task>,
}

impl Steering {
    /// Count missed heartbeats for every watched site, evacuate sites over
    /// the limit, resubmit parked tasks, and handle newly finished tasks.
    pub fn recovery_tick(&mut self, ctx: &mut Ctx<'_>) -> Vec<AuditRecord> {
        let start = self.audit.records().len();
        let now = ctx.fabric.now();
        for site in self.watch.clone() {
            let Ok(health) = ctx.fabric.site_health(&site) else { continue };
            let missed = health.last_heartbeat.map_or(0, |hb| {
                let interval = health.heartbeat_interval.max(f64::MIN_POSITIVE);
                ((now - hb) / interval + 1e-9).floor().max(0.0) as u64
            });
            if missed >= MISSED_HEARTBEAT_LIMIT {
                if self.failed_sites.insert(site.clone()) {
                    self.log(now, "recovery", Verb::SiteFailed, site.to_string(), &Ok(()));
                }
            } else if self.failed_sites.contains(&site) && health.alive {
                self.failed_sites.remove(&site);
                self.log(now, "recovery", Verb::SiteRecovered, site.to_string(), &Ok(()));
            }
            if self.failed_sites.contains(&site) {
                for id in ctx.fabric.resident_ids(&site).unwrap_or_default() {
                    let r = ctx.fabric.abandon_task(&site, &id).map(|_| ()).map_err(SteeringError::from);
                    if r.is_ok() {
                        self.parked.insert(id.clone());
                    }
                    self.log(now, "recovery", Verb::Abandon, id.to_string(), &r);
                }
            }
        }
        // tasks left between sites, e.g. a relocation whose target died
        for id in ctx.fabric.stranded() {
            if self.task_jobs.contains_key(&id) || self.is_shadow(&id) {
                self.parked.insert(id);
            }
        }
        self.resubmit_parked(ctx);
        self.handle_finished(ctx);
        self.dispatch_ready(ctx);
        self.audit.records()[start..].to_vec()
    }

    fn resubmit_parked(&mut self, ctx: &mut Ctx<'_>) {
        let now = ctx.fabric.now();
        let exclude: Vec<SiteId> = self.failed_sites.iter().cloned().collect();
        for id in self.parked.clone() {
            let Some(view) = ctx.fabric.task(&id) else {
                self.parked.remove(&id);
                continue;
            };
            if view.task.state != TaskState::Moving || view.in_transit_to.is_some() || view.task.assigned_site.is_some() {
                self.parked.remove(&id);
                continue;
            }
            match ctx.scheduler.resubmit(ctx.fabric, ctx.history, &id, &exclude, None) {
                Ok(scored) => {
                    let dest = scored.chosen;
                    let legs = migration_legs(&view, None, &dest);
                    let r = ctx.fabric.relocate(&id, &dest, None, &legs).map(|_| ()).map_err(SteeringError::from);
                    if r.is_ok() {
                        self.parked.remove(&id);
                        self.watch.insert(dest.clone());
                    }
                    self.audit.push(AuditRecord {
                        time: now,
                        session: "recovery".into(),
                        verb: Verb::Resubmit,
                        target: id.to_string(),
                        outcome: match &r {
                            Ok(()) => "ok".into(),
                            Err(e) => e.to_string(),
                        },
                        site: Some(dest),
                        scores: None,
                    });
                }
                Err(SchedulerError::NoAliveSites) => {
                    let already = self
                        .audit
                        .records()
                        .iter()
                        .rev()
                        .find(|r| r.target == id.as_str())
                        .is_some_and(|r| r.verb == Verb::Park);
                    if !already {
                        self.log(now, "recovery", Verb::Park, id.to_string(), &Err(SteeringError::NoAliveSites));
                    }
                }
                Err(e) => {
                    self.log(now, "recovery", Verb::Park, id.to_string(), &Err(e.into()));
                }
            }
        }
    }

    fn handle_finished(&mut self, ctx: &mut Ctx<'_>) {
        let journal = ctx.fabric.status_journal();
        let fresh: Vec<_> = journal[self.journal_cursor.min(journal.len())..].to_vec();
        self.journal_cursor = journal.len();
        for change in fresh {
            let kind = match change.new_status {
                Observed::State(TaskState::Completed) => NotificationKind::Completed,
                Observed::State(TaskState::Failed) => NotificationKind::Failed,
                _ => continue,
            };
            let id = &change.task_id;
            let Some(owner) = self.owner_of(id).map(str::to_string).or_else(|| {
                let original = self.shadows.iter().find(|(_, s)| *s == id).map(|(o, _)| o.clone())?;
                self.owner_of(&original).map(str::to_string)
            }) else {
                continue;
            };
            let Some(view) = ctx.fabric.task(id) else { continue };
            self.notifications.push(Notification { at: change.at, owner: owner.clone(), task_id: id.clone(), kind });
            if kind == NotificationKind::Completed {
                if let Some(site) = change.site_id.as_ref() {
                    let account = view.task.attributes.account.clone();
                    self.accounting.debit(change.at, &account, id, site, view.task.wall_clock_accumulated);
                }
            }
            self.downloads.insert(
                id.clone(),
                DownloadPackage {
                    task_id: id.clone(),
                    status: view.task.state,
                    staged_at: change.at,
                    site_id: change.site_id.clone(),
                    files: view.local_files.clone(),
                    execution_state: (kind == NotificationKind::Completed).then(|| view.task.clone()),
                },
            );
        }
    }
}
