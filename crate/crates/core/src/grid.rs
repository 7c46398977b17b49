//! All services over one fabric, and the virtual-time control loop that
//! drives them.
//!
//! At each control point the loop first advances the fabric, then admits
//! due job submissions, then syncs the monitor, then runs the recovery
//! tick, then (on multiples of the policy's check interval) the optimizer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::GridError;
use crate::fabric::{Fabric, SimParams};
use crate::history::HistoryStore;
use crate::model::{ConcretePlan, Estimate, InputFile, Job, JobId, SiteId, Task, TaskAttributes, TaskId, VirtualTime};
use crate::monitoring::{Monitor, MonitorError, DEFAULT_SYNC_INTERVAL};
use crate::scenario::Scenario;
use crate::scheduler::Scheduler;
use crate::steering::{Actor, AuditLog, AuditRecord, Ctx, OptimizerPolicy, SessionManager, Steering, SteeringCommand};

pub type GridResult<T> = Result<T, GridError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    pub sync_interval: f64,
    pub recovery_interval: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { sync_interval: DEFAULT_SYNC_INTERVAL, recovery_interval: 1.0 }
    }
}

/// One task of a job submission. `runtime`, `fails_at` and `output_bytes`
/// drive the simulation and are never reported back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSubmission {
    pub task_id: TaskId,
    pub user: String,
    #[serde(default = "default_name")]
    pub account: String,
    #[serde(default = "default_name")]
    pub queue: String,
    #[serde(default = "default_name")]
    pub partition: String,
    #[serde(default = "default_type")]
    pub job_type: crate::model::JobType,
    #[serde(default = "one")]
    pub nodes: u32,
    #[serde(default = "one_f")]
    pub cpu_hours: f64,
    #[serde(default)]
    pub inputs: Vec<InputFile>,
    #[serde(default)]
    pub priority: i64,
    #[serde(default)]
    pub checkpointable: bool,
    #[serde(default)]
    pub environment: BTreeMap<String, String>,
    pub runtime: f64,
    #[serde(default)]
    pub fails_at: Option<f64>,
    #[serde(default)]
    pub output_bytes: u64,
}

fn default_name() -> String {
    "default".into()
}
fn default_type() -> crate::model::JobType {
    crate::model::JobType::Batch
}
fn one() -> u32 {
    1
}
fn one_f() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSubmission {
    pub job_id: JobId,
    #[serde(default)]
    pub owner: Option<String>,
    pub tasks: Vec<TaskSubmission>,
    #[serde(default)]
    pub edges: Vec<(TaskId, TaskId)>,
    /// Explicit placement; the scheduler plans the job when absent.
    #[serde(default)]
    pub plan: Option<BTreeMap<TaskId, SiteId>>,
}

impl JobSubmission {
    pub fn to_job(&self) -> GridResult<(Job, BTreeMap<TaskId, SimParams>)> {
        let mut tasks = Vec::new();
        let mut params = BTreeMap::new();
        for t in &self.tasks {
            let attributes = TaskAttributes {
                user: t.user.clone(),
                account: t.account.clone(),
                queue_name: t.queue.clone(),
                partition: t.partition.clone(),
                job_type: t.job_type,
                nodes: t.nodes,
                requested_cpu_hours: t.cpu_hours,
                input_files: t.inputs.clone(),
                priority: t.priority,
            };
            attributes.validate()?;
            let mut task = Task::new(t.task_id.clone(), self.job_id.clone(), attributes);
            task.checkpointable = t.checkpointable;
            task.environment = t.environment.clone();
            tasks.push(task);
            params.insert(
                t.task_id.clone(),
                SimParams { true_runtime: t.runtime, fails_at: t.fails_at, output_bytes: t.output_bytes },
            );
        }
        let owner = self
            .owner
            .clone()
            .or_else(|| tasks.first().map(|t| t.attributes.user.clone()))
            .unwrap_or_default();
        let job = Job { job_id: self.job_id.clone(), owner, tasks, edges: self.edges.clone() };
        job.validate()?;
        Ok((job, params))
    }
}

/// The jobs of a scenario as submissions, with their submission times.
pub fn scenario_submissions(sc: &Scenario) -> Vec<(VirtualTime, JobSubmission)> {
    let mut out = Vec::new();
    for job in sc.job_list() {
        let tasks = job
            .tasks
            .iter()
            .map(|t| {
                let st = sc.tasks.iter().find(|s| s.task.task_id == t.task_id).expect("task of job");
                let a = &t.attributes;
                TaskSubmission {
                    task_id: t.task_id.clone(),
                    user: a.user.clone(),
                    account: a.account.clone(),
                    queue: a.queue_name.clone(),
                    partition: a.partition.clone(),
                    job_type: a.job_type,
                    nodes: a.nodes,
                    cpu_hours: a.requested_cpu_hours,
                    inputs: a.input_files.clone(),
                    priority: a.priority,
                    checkpointable: t.checkpointable,
                    environment: t.environment.clone(),
                    runtime: st.params.true_runtime,
                    fails_at: st.params.fails_at,
                    output_bytes: st.params.output_bytes,
                }
            })
            .collect();
        let at = sc.job_submit_time(&job.job_id);
        out.push((
            at,
            JobSubmission {
                job_id: job.job_id.clone(),
                owner: Some(job.owner.clone()),
                tasks,
                edges: job.edges.clone(),
                plan: sc.plans.get(&job.job_id).cloned(),
            },
        ));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.job_id.cmp(&b.1.job_id)));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubmitOutcome {
    pub job_id: JobId,
    pub plan: ConcretePlan,
    pub estimates: BTreeMap<TaskId, Estimate>,
    pub watch_list: Vec<SiteId>,
}

pub struct Grid {
    pub fabric: Fabric,
    pub history: HistoryStore,
    pub monitor: Monitor,
    pub scheduler: Scheduler,
    pub steering: Steering,
    config: GridConfig,
    pending: Vec<(VirtualTime, JobSubmission)>,
    rejected: Vec<(JobId, String)>,
    replay: Vec<AuditRecord>,
    sync_k: u64,
    recovery_k: u64,
    optimizer_k: u64,
}

impl Default for Grid {
    fn default() -> Self {
        Self::new(Fabric::new(), HistoryStore::in_memory(), Monitor::in_memory(), Steering::default())
    }
}

impl Grid {
    pub fn new(fabric: Fabric, history: HistoryStore, monitor: Monitor, steering: Steering) -> Self {
        let mut g = Self {
            fabric,
            history,
            monitor,
            scheduler: Scheduler::default(),
            steering,
            config: GridConfig::default(),
            pending: Vec::new(),
            rejected: Vec::new(),
            replay: Vec::new(),
            sync_k: 0,
            recovery_k: 0,
            optimizer_k: 0,
        };
        g.reset_clocks();
        g
    }

    /// Build the grid a scenario describes. With `store` the history,
    /// monitoring logs and audit log persist under that directory.
    pub fn from_scenario(sc: &Scenario, store: Option<&Path>) -> GridResult<Self> {
        let (history, monitor, audit) = match store {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(MonitorError::from)?;
                (
                    HistoryStore::open(dir)?,
                    Monitor::open(dir)?,
                    AuditLog::create(&dir.join("audit.log")).map_err(MonitorError::from)?,
                )
            }
            None => (HistoryStore::in_memory(), Monitor::in_memory(), AuditLog::default()),
        };
        let mut sessions = SessionManager::default();
        for (user, password, role) in &sc.users {
            sessions.add_user(user, password, *role);
        }
        let mut steering = Steering::new(sessions);
        steering.audit = audit;
        steering.set_dual_run(sc.dual_run);
        if let Some(p) = sc.policy {
            steering.set_policy(Actor::Internal("scenario"), p, 0.0)?;
        }
        let mut fabric = Fabric::new();
        for spec in &sc.sites {
            steering.accounting.set_rate(spec.site_id.clone(), spec.cost_rate);
            fabric.add_site(spec.clone())?;
        }
        for (a, b, bw) in &sc.links {
            fabric.add_link(a.clone(), b.clone(), *bw)?;
            fabric.add_link(b.clone(), a.clone(), *bw)?;
        }
        for (site, at, load) in &sc.loads {
            fabric.schedule_load_change(site, *at, *load)?;
        }
        for (site, at, fault) in &sc.faults {
            fabric.schedule_fault(site, *at, *fault)?;
        }
        let mut grid = Self::new(fabric, history, monitor, steering);
        for file in &sc.history_files {
            grid.history.ingest_trace_path(file)?;
        }
        for rec in &sc.history_records {
            grid.history.add_record(rec.clone())?;
        }
        grid.pending = scenario_submissions(sc);
        Ok(grid)
    }

    pub fn config(&self) -> GridConfig {
        self.config
    }

    pub fn set_config(&mut self, config: GridConfig) {
        self.config = config;
        self.reset_clocks();
    }

    fn reset_clocks(&mut self) {
        let now = self.fabric.now();
        let first = |interval: f64| if interval > 0.0 { (now / interval).floor() as u64 + 1 } else { u64::MAX };
        self.sync_k = first(self.config.sync_interval);
        self.recovery_k = first(self.config.recovery_interval);
        self.optimizer_k = first(self.steering.policy().check_interval);
    }

    pub fn now(&self) -> VirtualTime {
        self.fabric.now()
    }

    /// Jobs waiting for their submission time.
    pub fn pending(&self) -> impl Iterator<Item = &(VirtualTime, JobSubmission)> {
        self.pending.iter()
    }

    /// Scheduled submissions that were refused, with the reason.
    pub fn rejected(&self) -> &[(JobId, String)] {
        &self.rejected
    }

    /// Queue a submission for virtual time `at`; due ones are admitted on
    /// the next control step.
    pub fn schedule_submission(&mut self, at: VirtualTime, job: JobSubmission) {
        let pos = self.pending.partition_point(|(t, j)| (*t, &j.job_id) <= (at, &job.job_id));
        self.pending.insert(pos, (at, job));
    }

    fn parts(&mut self) -> (Ctx<'_>, &mut Steering) {
        (Ctx { fabric: &mut self.fabric, history: &mut self.history, scheduler: &self.scheduler }, &mut self.steering)
    }

    /// Admit a job now: plan it (or take its explicit plan), admit its
    /// tasks to the fabric and hand the plan to steering.
    pub fn submit(&mut self, actor: Actor<'_>, sub: &JobSubmission) -> GridResult<SubmitOutcome> {
        let now = self.fabric.now();
        let (job, params) = sub.to_job()?;
        if self.steering.job(&job.job_id).is_some() {
            return Err(crate::steering::SteeringError::DuplicateJob(job.job_id).into());
        }
        for t in &job.tasks {
            if self.fabric.has_task(&t.task_id) {
                return Err(crate::fabric::FabricError::DuplicateTask(t.task_id.clone()).into());
            }
        }
        if let Actor::Session(token) = actor {
            let s = self.steering.sessions.validate(token, now)?;
            if !s.may_steer(&job.owner) {
                return Err(crate::steering::SteeringError::Unauthorized.into());
            }
        }
        let (plan, estimates) = match &sub.plan {
            Some(assignments) => {
                let plan = ConcretePlan {
                    job_id: job.job_id.clone(),
                    assignments: assignments.clone(),
                    created_by: "operator".into(),
                    plan_time: now,
                };
                (plan, BTreeMap::new())
            }
            None => {
                let report = self.scheduler.plan(&self.fabric, &self.history, &job, "scheduler", now)?;
                let est = report.tasks.iter().map(|t| (t.task_id.clone(), t.estimate)).collect();
                (report.plan, est)
            }
        };
        for t in &job.tasks {
            self.fabric.admit(t.clone(), params[&t.task_id].clone())?;
        }
        self.steering.register_job(&self.fabric, job.clone())?;
        let (mut ctx, steering) = self.parts();
        let watch_list = steering.submit_plan(&mut ctx, actor, plan.clone(), &estimates)?;
        let estimates = job
            .tasks
            .iter()
            .filter_map(|t| self.history.lookup_estimate(&t.task_id).map(|e| (t.task_id.clone(), e)))
            .collect();
        Ok(SubmitOutcome { job_id: job.job_id, plan, estimates, watch_list })
    }

    /// Run a steering command at the current clock.
    pub fn command(&mut self, actor: Actor<'_>, cmd: &SteeringCommand) -> GridResult<Vec<Task>> {
        let (mut ctx, steering) = self.parts();
        let out = steering.execute_command(&mut ctx, actor, cmd);
        self.sync_monitor();
        Ok(out?)
    }

    fn next_control(&self) -> VirtualTime {
        let at = |k: u64, i: f64| if k == u64::MAX { f64::INFINITY } else { k as f64 * i };
        let mut next = at(self.sync_k, self.config.sync_interval).min(at(self.recovery_k, self.config.recovery_interval));
        if self.steering.policy().enabled {
            next = next.min(at(self.optimizer_k, self.steering.policy().check_interval));
        }
        if let Some((t, _)) = self.pending.first() {
            next = next.min(*t);
        }
        if let Some(r) = self.replay.first() {
            next = next.min(r.time);
        }
        next
    }

    /// Run one control step at the current clock.
    fn control(&mut self) {
        let now = self.fabric.now();
        while self.pending.first().is_some_and(|(t, _)| *t <= now) {
            let (_, sub) = self.pending.remove(0);
            if let Err(e) = self.submit(Actor::Internal("scenario"), &sub) {
                self.rejected.push((sub.job_id.clone(), e.to_string()));
            }
        }
        let due = |k: u64, i: f64| k != u64::MAX && k as f64 * i <= now;
        if due(self.sync_k, self.config.sync_interval) {
            self.sync_monitor();
            while due(self.sync_k, self.config.sync_interval) {
                self.sync_k += 1;
            }
        }
        if due(self.recovery_k, self.config.recovery_interval) {
            let (mut ctx, steering) = self.parts();
            steering.recovery_tick(&mut ctx);
            while due(self.recovery_k, self.config.recovery_interval) {
                self.recovery_k += 1;
            }
        }
        let interval = self.steering.policy().check_interval;
        if due(self.optimizer_k, interval) {
            if self.steering.policy().enabled {
                let (mut ctx, steering) = self.parts();
                steering.optimizer_tick(&mut ctx);
            }
            while due(self.optimizer_k, interval) {
                self.optimizer_k += 1;
            }
        }
        while self.replay.first().is_some_and(|r| r.time <= now) {
            let rec = self.replay.remove(0);
            let (mut ctx, steering) = self.parts();
            let _ = steering.replay_record(&mut ctx, &rec);
        }
    }

    /// Pull fabric status changes into the monitor. An offline collector
    /// is not an error here; queries fall back to the store.
    pub fn sync_monitor(&mut self) -> usize {
        match self.monitor.collector_sync(&self.fabric, &self.history) {
            Ok(n) => n,
            Err(MonitorError::FabricUnreachable) => 0,
            Err(_) => 0,
        }
    }

    /// Advance virtual time to `until`, running every control step on the
    /// way.
    pub fn run_until(&mut self, until: VirtualTime) -> GridResult<()> {
        if until < self.fabric.now() {
            return Err(crate::fabric::FabricError::ClockRegression { now: self.fabric.now(), until }.into());
        }
        loop {
            let next = self.next_control();
            if next > until {
                break;
            }
            let t = next.max(self.fabric.now());
            self.fabric.advance(t)?;
            self.control();
        }
        self.fabric.advance(until)?;
        self.sync_monitor();
        Ok(())
    }

    /// Replace the optimizer policy and realign its check times.
    pub fn set_policy(&mut self, actor: Actor<'_>, policy: OptimizerPolicy) -> GridResult<()> {
        let now = self.fabric.now();
        self.steering.set_policy(actor, policy, now)?;
        self.optimizer_k = (now / policy.check_interval).floor() as u64 + 1;
        Ok(())
    }

    /// Re-run a scenario from scratch applying the successful commands of
    /// an audit log at their recorded times, with the optimizer off (its
    /// decisions are in the log).
    pub fn replay(sc: &Scenario, records: &[AuditRecord]) -> GridResult<Self> {
        let mut grid = Self::from_scenario(sc, None)?;
        let mut policy = *grid.steering.policy();
        policy.enabled = false;
        grid.set_policy(Actor::Internal("replay"), policy)?;
        grid.replay = records
            .iter()
            .filter(|r| r.verb.is_command() && r.succeeded() && r.session != "replay")
            .cloned()
            .collect();
        grid.replay.sort_by(|a, b| a.time.total_cmp(&b.time));
        if let Some(end) = sc.run_until {
            grid.run_until(end)?;
        }
        Ok(grid)
    }

    /// Final state of every task, in id order.
    pub fn task_states(&self) -> Vec<(TaskId, crate::model::TaskState, Option<SiteId>)> {
        self.fabric
            .tasks()
            .into_iter()
            .map(|v| (v.task.task_id, v.task.state, v.task.assigned_site))
            .collect()
    }
}
