//! The steering service: plan subscription, user job control, the
//! placement optimizer and failure recovery, behind session checks.

mod accounting;
mod audit;
mod optimizer;
mod recovery;
mod sessions;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use accounting::{Accounting, Debit};
pub use audit::{AuditLog, AuditRecord, ScoreRow};
pub use optimizer::{Objective, OptimizerPolicy};
pub use recovery::{DownloadPackage, Notification, NotificationKind, MISSED_HEARTBEAT_LIMIT};
pub use sessions::{Role, Session, SessionManager, DEFAULT_SESSION_TTL};

use crate::estimators::{estimate_runtime, EstimatorError};
use crate::fabric::{Control, Fabric, FabricError, TaskView, TransferLeg};
use crate::history::HistoryStore;
use crate::model::{ConcretePlan, Estimate, Job, JobId, SiteId, Task, TaskId, TaskState, VirtualTime};
use crate::scheduler::{Scheduler, SchedulerError};

/// Suffix of the copy started by a move when the original is kept running.
pub const SHADOW_SUFFIX: &str = "~moved";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SteeringError {
    #[error("unauthorized")]
    Unauthorized,
    #[error("session expired")]
    SessionExpired,
    #[error("bad credentials")]
    BadCredentials,
    #[error("illegal transition for {task}: {from} -> {to}")]
    IllegalTransition { task: TaskId, from: TaskState, to: TaskState },
    #[error("no alive sites")]
    NoAliveSites,
    #[error("unknown site {0}")]
    UnknownSite(SiteId),
    #[error("site {0} is down")]
    SiteDown(SiteId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("job {0} already has a different plan")]
    DuplicatePlan(JobId),
    #[error("job {0} already registered")]
    DuplicateJob(JobId),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid command: {0}")]
    InvalidCommand(String),
    #[error("nothing to download for {0}")]
    NotAvailable(TaskId),
    #[error("fabric: {0}")]
    Fabric(String),
}

impl From<FabricError> for SteeringError {
    fn from(e: FabricError) -> Self {
        match e {
            FabricError::IllegalTransition { task, from, to } => SteeringError::IllegalTransition { task, from, to },
            FabricError::UnknownSite(s) => SteeringError::UnknownSite(s),
            FabricError::SiteDown(s) => SteeringError::SiteDown(s),
            FabricError::UnknownTask(t) => SteeringError::UnknownTask(t),
            other => SteeringError::Fabric(other.to_string()),
        }
    }
}

impl From<SchedulerError> for SteeringError {
    fn from(e: SchedulerError) -> Self {
        match e {
            SchedulerError::NoAliveSites => SteeringError::NoAliveSites,
            SchedulerError::UnknownTask(t) => SteeringError::UnknownTask(t),
            other => SteeringError::Fabric(other.to_string()),
        }
    }
}

impl From<EstimatorError> for SteeringError {
    fn from(e: EstimatorError) -> Self {
        match e {
            EstimatorError::UnknownSite(s) => SteeringError::UnknownSite(s),
            EstimatorError::SiteDown(s) => SteeringError::SiteDown(s),
            EstimatorError::UnknownTask(t) => SteeringError::UnknownTask(t),
            other => SteeringError::Fabric(other.to_string()),
        }
    }
}

pub type SteeringResult<T> = Result<T, SteeringError>;

/// Destination of a move: chosen by the scheduler, or named by the user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MoveTarget {
    Auto,
    Site(SiteId),
}

impl fmt::Display for MoveTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MoveTarget::Auto => f.write_str("auto"),
            MoveTarget::Site(s) => s.fmt(f),
        }
    }
}

impl Serialize for MoveTarget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MoveTarget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s == "auto" { MoveTarget::Auto } else { MoveTarget::Site(SiteId::new(s)) })
    }
}

/// Command verbs, plus the internal actions that share the audit log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    Kill,
    Pause,
    Resume,
    SetPriority(i64),
    Move(MoveTarget),
    SubmitPlan,
    Evaluate,
    SiteFailed,
    SiteRecovered,
    Abandon,
    Resubmit,
    Park,
    Cascade,
}

impl Verb {
    /// Verbs a user (or the optimizer) can issue.
    pub fn is_command(&self) -> bool {
        matches!(self, Verb::Kill | Verb::Pause | Verb::Resume | Verb::SetPriority(_) | Verb::Move(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Task(TaskId),
    Job(JobId),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Task(t) => t.fmt(f),
            Target::Job(j) => write!(f, "job:{j}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringCommand {
    #[serde(default)]
    pub session_id: Option<String>,
    pub target: Target,
    pub verb: Verb,
}

/// Who is asking: a client session, or one of the service's own loops.
#[derive(Debug, Clone, Copy)]
pub enum Actor<'a> {
    Session(Option<&'a str>),
    Internal(&'static str),
}

/// The services steering acts through.
pub struct Ctx<'a> {
    pub fabric: &'a mut Fabric,
    pub history: &'a mut HistoryStore,
    pub scheduler: &'a Scheduler,
}

#[derive(Debug, Default)]
pub struct Steering {
    pub sessions: SessionManager,
    pub audit: AuditLog,
    pub accounting: Accounting,
    policy: OptimizerPolicy,
    dual_run: bool,
    watch: BTreeSet<SiteId>,
    jobs: BTreeMap<JobId, Job>,
    task_jobs: BTreeMap<TaskId, JobId>,
    orders: BTreeMap<JobId, Vec<TaskId>>,
    plans: BTreeMap<JobId, ConcretePlan>,
    /// Planned jobs that may still have tasks waiting for dispatch.
    open: BTreeSet<JobId>,
    shadows: BTreeMap<TaskId, TaskId>,
    failed_sites: BTreeSet<SiteId>,
    parked: BTreeSet<TaskId>,
    journal_cursor: usize,
    notifications: Vec<Notification>,
    downloads: BTreeMap<TaskId, DownloadPackage>,
}

/// Staging legs for moving a task from `source` to `dest`: its local files
/// from the source, and each input file from its home site.
pub fn migration_legs(view: &TaskView, source: Option<&SiteId>, dest: &SiteId) -> Vec<TransferLeg> {
    let mut legs = Vec::new();
    let local: u64 = view.local_files.iter().map(|f| f.size_bytes).sum();
    if let Some(src) = source {
        if local > 0 && src != dest {
            legs.push(TransferLeg { from: src.clone(), bytes: local });
        }
    }
    for f in &view.task.attributes.input_files {
        if let Some(home) = f.home_site.as_ref() {
            if home != dest && f.size_bytes > 0 {
                legs.push(TransferLeg { from: home.clone(), bytes: f.size_bytes });
            }
        }
    }
    legs
}

/// Duration of staging `legs` one after another into `dest`.
pub fn legs_time(fabric: &Fabric, legs: &[TransferLeg], dest: &SiteId) -> Result<f64, EstimatorError> {
    let mut total = 0.0;
    for leg in legs {
        if leg.from == *dest || leg.bytes == 0 {
            continue;
        }
        let bw = fabric
            .bandwidth(&leg.from, dest)
            .ok_or_else(|| EstimatorError::NoLink { from: leg.from.clone(), to: dest.clone() })?;
        total += leg.bytes as f64 / bw;
    }
    Ok(total)
}

impl Steering {
    pub fn new(sessions: SessionManager) -> Self {
        Self { sessions, ..Self::default() }
    }

    pub fn set_dual_run(&mut self, on: bool) {
        self.dual_run = on;
    }

    pub fn dual_run(&self) -> bool {
        self.dual_run
    }

    pub fn watch_list(&self) -> Vec<SiteId> {
        self.watch.iter().cloned().collect()
    }

    pub fn job(&self, id: &JobId) -> Option<&Job> {
        self.jobs.get(id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &Job> {
        self.jobs.values()
    }

    pub fn plan_of(&self, job: &JobId) -> Option<&ConcretePlan> {
        self.plans.get(job)
    }

    /// Copies started by dual-run moves, keyed by original task.
    pub fn shadows(&self) -> &BTreeMap<TaskId, TaskId> {
        &self.shadows
    }

    pub fn parked(&self) -> &BTreeSet<TaskId> {
        &self.parked
    }

    pub fn failed_sites(&self) -> &BTreeSet<SiteId> {
        &self.failed_sites
    }

    pub fn notifications(&self) -> &[Notification] {
        &self.notifications
    }

    pub fn owner_of(&self, task: &TaskId) -> Option<&str> {
        let job = self.task_jobs.get(task)?;
        self.jobs.get(job).map(|j| j.owner.as_str())
    }

    fn authorize(&self, actor: Actor<'_>, owner: &str, now: VirtualTime) -> SteeringResult<String> {
        match actor {
            Actor::Internal(name) => Ok(name.to_string()),
            Actor::Session(token) => {
                let s = self.sessions.validate(token, now)?;
                if s.may_steer(owner) {
                    Ok(s.session_id.clone())
                } else {
                    Err(SteeringError::Unauthorized)
                }
            }
        }
    }

    fn log(&mut self, time: VirtualTime, session: &str, verb: Verb, target: String, outcome: &SteeringResult<()>) {
        self.audit.push(AuditRecord {
            time,
            session: session.to_string(),
            verb,
            target,
            outcome: match outcome {
                Ok(()) => "ok".into(),
                Err(e) => e.to_string(),
            },
            site: None,
            scores: None,
        });
    }

    /// Make a job known to steering. Its tasks must already be admitted to
    /// the fabric.
    pub fn register_job(&mut self, fabric: &Fabric, job: Job) -> SteeringResult<()> {
        if self.jobs.contains_key(&job.job_id) {
            return Err(SteeringError::DuplicateJob(job.job_id));
        }
        let order = job.validate().map_err(|e| SteeringError::InvalidPlan(e.to_string()))?;
        for t in &job.tasks {
            if !fabric.has_task(&t.task_id) {
                return Err(SteeringError::UnknownTask(t.task_id.clone()));
            }
        }
        for t in &job.tasks {
            self.task_jobs.insert(t.task_id.clone(), job.job_id.clone());
        }
        self.orders.insert(job.job_id.clone(), order);
        self.jobs.insert(job.job_id.clone(), job);
        Ok(())
    }

    /// Accept a concrete plan: record submitted estimates, watch its sites
    /// and dispatch the tasks whose predecessors are done. Resubmitting the
    /// same plan is a no-op.
    pub fn submit_plan(
        &mut self,
        ctx: &mut Ctx<'_>,
        actor: Actor<'_>,
        plan: ConcretePlan,
        estimates: &BTreeMap<TaskId, Estimate>,
    ) -> SteeringResult<Vec<SiteId>> {
        let now = ctx.fabric.now();
        let job = self.jobs.get(&plan.job_id).ok_or_else(|| SteeringError::UnknownJob(plan.job_id.clone()))?;
        let who = self.authorize(actor, &job.owner.clone(), now)?;
        if let Some(existing) = self.plans.get(&plan.job_id) {
            if existing.plan_time == plan.plan_time && existing.assignments == plan.assignments {
                return Ok(self.watch_list());
            }
            return Err(SteeringError::DuplicatePlan(plan.job_id));
        }
        let ids: BTreeSet<&TaskId> = job.tasks.iter().map(|t| &t.task_id).collect();
        let planned: BTreeSet<&TaskId> = plan.assignments.keys().collect();
        if ids != planned {
            return Err(SteeringError::InvalidPlan(format!("plan for {} must assign exactly its tasks", plan.job_id)));
        }
        for site in plan.assignments.values() {
            ctx.fabric.site(site).map_err(|_| SteeringError::UnknownSite(site.clone()))?;
        }
        for t in job.tasks.clone() {
            let est = match estimates.get(&t.task_id) {
                Some(e) => Some(*e),
                None => estimate_runtime(ctx.history, &t.attributes).ok(),
            };
            if let Some(e) = est {
                ctx.history
                    .record_estimate(t.task_id.clone(), e, now)
                    .map_err(|e| SteeringError::Fabric(e.to_string()))?;
                ctx.fabric.set_submitted_estimate(&t.task_id, e)?;
            }
        }
        self.watch.extend(plan.assignments.values().cloned());
        let job_id = plan.job_id.clone();
        self.plans.insert(job_id.clone(), plan);
        self.open.insert(job_id.clone());
        self.log(now, &who, Verb::SubmitPlan, format!("job:{job_id}"), &Ok(()));
        self.dispatch_ready(ctx);
        Ok(self.watch_list())
    }

    /// Start planned tasks whose predecessors completed; kill planned tasks
    /// whose predecessors failed or were killed.
    pub fn dispatch_ready(&mut self, ctx: &mut Ctx<'_>) {
        let now = ctx.fabric.now();
        for job_id in self.open.clone() {
            let order = self.orders[&job_id].clone();
            let mut waiting = false;
            for id in order {
                if ctx.fabric.state_of(&id) != Some(TaskState::Planned) {
                    continue;
                }
                waiting = true;
                let Some(view) = ctx.fabric.task(&id) else { continue };
                if view.in_transit_to.is_some() {
                    continue;
                }
                let preds: Vec<TaskState> =
                    self.jobs[&job_id].predecessors(&id).filter_map(|p| ctx.fabric.state_of(p)).collect();
                if preds.iter().any(|s| matches!(s, TaskState::Failed | TaskState::Killed)) {
                    let r = ctx.fabric.cancel(&id).map(|_| ()).map_err(SteeringError::from);
                    self.log(now, "steering", Verb::Cascade, id.to_string(), &r);
                    continue;
                }
                if !preds.iter().all(|s| *s == TaskState::Completed) {
                    continue;
                }
                let site = self.plans[&job_id].assignments[&id].clone();
                let alive = ctx.fabric.site_health(&site).map(|s| s.alive).unwrap_or(false);
                let dest = if alive && !self.failed_sites.contains(&site) {
                    site
                } else {
                    let mut exclude: Vec<SiteId> = self.failed_sites.iter().cloned().collect();
                    exclude.push(site);
                    match ctx.scheduler.resubmit(ctx.fabric, ctx.history, &id, &exclude, None) {
                        Ok(s) => s.chosen,
                        Err(_) => continue,
                    }
                };
                let legs = migration_legs(&view, None, &dest);
                if ctx.fabric.relocate(&id, &dest, None, &legs).is_ok() {
                    self.watch.insert(dest);
                }
            }
            if !waiting {
                self.open.remove(&job_id);
            }
        }
    }

    /// Run a user command. Job targets apply to each unfinished task of the
    /// job; the first failure is returned after the rest were attempted.
    pub fn execute_command(&mut self, ctx: &mut Ctx<'_>, actor: Actor<'_>, cmd: &SteeringCommand) -> SteeringResult<Vec<Task>> {
        let now = ctx.fabric.now();
        // no session, no information about the target either
        if let Actor::Session(token) = actor {
            if let Err(e) = self.sessions.validate(token, now) {
                self.log(now, token.unwrap_or("-"), cmd.verb.clone(), cmd.target.to_string(), &Err(e.clone()));
                return Err(e);
            }
        }
        let (owner, tasks) = match &cmd.target {
            Target::Task(id) => {
                let owner = self.owner_of(id).ok_or_else(|| SteeringError::UnknownTask(id.clone()))?.to_string();
                (owner, vec![id.clone()])
            }
            Target::Job(j) => {
                let job = self.jobs.get(j).ok_or_else(|| SteeringError::UnknownJob(j.clone()))?;
                let ids = job
                    .tasks
                    .iter()
                    .map(|t| t.task_id.clone())
                    .filter(|id| ctx.fabric.task(id).is_some_and(|v| !v.task.state.is_terminal()))
                    .collect();
                (job.owner.clone(), ids)
            }
        };
        let who = match self.authorize(actor, &owner, now) {
            Ok(w) => w,
            Err(e) => {
                let label = match actor {
                    Actor::Session(Some(s)) => s.to_string(),
                    _ => "-".to_string(),
                };
                self.log(now, &label, cmd.verb.clone(), cmd.target.to_string(), &Err(e.clone()));
                return Err(e);
            }
        };
        if !cmd.verb.is_command() {
            return Err(SteeringError::InvalidCommand(format!("{:?} is not a steering command", cmd.verb)));
        }
        let mut out = Vec::new();
        let mut first_err = None;
        for id in tasks {
            match self.apply(ctx, &who, &id, &cmd.verb, None) {
                Ok(t) => out.push(t),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    /// Apply one verb to one task and audit the outcome.
    fn apply(
        &mut self,
        ctx: &mut Ctx<'_>,
        who: &str,
        id: &TaskId,
        verb: &Verb,
        scores: Option<Vec<ScoreRow>>,
    ) -> SteeringResult<Task> {
        let now = ctx.fabric.now();
        let result = self.apply_inner(ctx, id, verb);
        let (outcome, site) = match &result {
            Ok((_, site)) => ("ok".to_string(), site.clone()),
            Err(e) => (e.to_string(), None),
        };
        self.audit.push(AuditRecord { time: now, session: who.to_string(), verb: verb.clone(), target: id.to_string(), outcome, site, scores });
        result.map(|(t, _)| t)
    }

    fn apply_inner(&mut self, ctx: &mut Ctx<'_>, id: &TaskId, verb: &Verb) -> SteeringResult<(Task, Option<SiteId>)> {
        let view = ctx.fabric.task(id).ok_or_else(|| SteeringError::UnknownTask(id.clone()))?;
        let state = view.task.state;
        let resident = matches!(state, TaskState::Queued | TaskState::Running | TaskState::Paused)
            && view.task.assigned_site.is_some();
        let site = view.task.assigned_site.clone();
        let illegal = |to| SteeringError::IllegalTransition { task: id.clone(), from: state, to };
        let control = |ctx: &mut Ctx<'_>, action, to| -> SteeringResult<(Task, Option<SiteId>)> {
            match (&site, resident) {
                (Some(s), true) => Ok((ctx.fabric.control(s, id, action)?, None)),
                _ => Err(illegal(to)),
            }
        };
        match verb {
            Verb::Kill => {
                if resident {
                    control(ctx, Control::Kill, TaskState::Killed)
                } else if matches!(state, TaskState::Planned | TaskState::Moving) {
                    self.parked.remove(id);
                    Ok((ctx.fabric.cancel(id)?, None))
                } else {
                    Err(illegal(TaskState::Killed))
                }
            }
            Verb::Pause => control(ctx, Control::Pause, TaskState::Paused),
            Verb::Resume => control(ctx, Control::Resume, TaskState::Running),
            Verb::SetPriority(p) => control(ctx, Control::SetPriority(*p), state),
            Verb::Move(target) => self.migrate(ctx, &view, target).map(|(t, s)| (t, Some(s))),
            other => Err(SteeringError::InvalidCommand(format!("{other:?} is not a steering command"))),
        }
    }

    /// Move a resident task: choose the destination, stage its files and
    /// enqueue it there, carrying the checkpoint when it has one.
    fn migrate(&mut self, ctx: &mut Ctx<'_>, view: &TaskView, target: &MoveTarget) -> SteeringResult<(Task, SiteId)> {
        let id = &view.task.task_id;
        let state = view.task.state;
        let source = match (&view.task.assigned_site, state) {
            (Some(s), TaskState::Queued | TaskState::Running | TaskState::Paused) => s.clone(),
            _ => return Err(SteeringError::IllegalTransition { task: id.clone(), from: state, to: TaskState::Moving }),
        };
        if self.shadows.contains_key(id) || self.is_shadow(id) {
            return Err(SteeringError::InvalidCommand(format!("{id} already has a migrated copy")));
        }
        if !ctx.fabric.site(&source)?.alive {
            return Err(SteeringError::SiteDown(source));
        }
        let accrued = view.task.wall_clock_accumulated;
        let checkpoint = (view.task.checkpointable && accrued > 0.0).then_some(accrued);
        let dest = match target {
            MoveTarget::Auto => {
                let mut exclude: Vec<SiteId> = self.failed_sites.iter().cloned().collect();
                exclude.push(source.clone());
                ctx.scheduler.resubmit(ctx.fabric, ctx.history, id, &exclude, checkpoint)?.chosen
            }
            MoveTarget::Site(s) => {
                let snap = ctx.fabric.site(s)?;
                if !snap.alive {
                    return Err(SteeringError::SiteDown(s.clone()));
                }
                if *s == source {
                    return Err(SteeringError::InvalidCommand(format!("{id} is already at {s}")));
                }
                s.clone()
            }
        };
        let legs = migration_legs(view, Some(&source), &dest);
        legs_time(ctx.fabric, &legs, &dest)?;
        if self.dual_run {
            let shadow = TaskId::new(format!("{id}{SHADOW_SUFFIX}"));
            ctx.fabric.clone_task(id, shadow.clone())?;
            if let Some(e) = ctx.history.lookup_estimate(id).or(view.task.submitted_estimate) {
                ctx.history.record_estimate(shadow.clone(), e, ctx.fabric.now()).map_err(|e| SteeringError::Fabric(e.to_string()))?;
            }
            ctx.fabric.relocate(&shadow, &dest, checkpoint, &legs)?;
            self.shadows.insert(id.clone(), shadow);
        } else {
            let extraction = ctx.fabric.extract_task(&source, id)?;
            ctx.fabric.relocate(id, &dest, extraction.checkpoint, &legs)?;
        }
        self.watch.insert(dest.clone());
        let task = ctx.fabric.task(id).expect("present").task;
        Ok((task, dest))
    }

    pub fn is_shadow(&self, id: &TaskId) -> bool {
        self.shadows.values().any(|s| s == id)
    }

    pub fn login(&mut self, user: &str, password: &str, now: VirtualTime) -> SteeringResult<Session> {
        self.sessions.login(user, password, now)
    }

    pub fn logout(&mut self, session_id: &str) -> SteeringResult<()> {
        self.sessions.logout(session_id)
    }

    pub fn policy(&self) -> &OptimizerPolicy {
        &self.policy
    }

    /// Replace the optimizer policy. Requires an admin session unless
    /// called internally.
    pub fn set_policy(&mut self, actor: Actor<'_>, policy: OptimizerPolicy, now: VirtualTime) -> SteeringResult<()> {
        if let Actor::Session(token) = actor {
            let s = self.sessions.validate(token, now)?;
            if s.role != Role::Admin {
                return Err(SteeringError::Unauthorized);
            }
        }
        policy.validate()?;
        self.policy = policy;
        Ok(())
    }

    /// The staged files or execution state of a finished task.
    pub fn download_state(&self, actor: Actor<'_>, task: &TaskId, now: VirtualTime) -> SteeringResult<&DownloadPackage> {
        let owner = self.owner_of(task).ok_or_else(|| SteeringError::UnknownTask(task.clone()))?;
        self.authorize(actor, owner, now)?;
        self.downloads.get(task).ok_or_else(|| SteeringError::NotAvailable(task.clone()))
    }

    pub fn audit_log(&self, actor: Actor<'_>, now: VirtualTime) -> SteeringResult<&[AuditRecord]> {
        if let Actor::Session(token) = actor {
            self.sessions.validate(token, now)?;
        }
        Ok(self.audit.records())
    }

    /// Apply a recorded command again, as an internal actor, for replay.
    pub fn replay_record(&mut self, ctx: &mut Ctx<'_>, record: &AuditRecord) -> SteeringResult<Task> {
        let id = TaskId::new(record.target.clone());
        let verb = match (&record.verb, &record.site) {
            (Verb::Move(_), Some(site)) => Verb::Move(MoveTarget::Site(site.clone())),
            (v, _) => v.clone(),
        };
        self.apply(ctx, "replay", &id, &verb, None)
    }
}
