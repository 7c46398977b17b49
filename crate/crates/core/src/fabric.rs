//! Discrete-event execution fabric.
//!
//! Sites hold a priority-ordered queue and a bounded set of running slots.
//! A running task accrues CPU-attributed wall-clock time at rate
//! `1 / (1 + load_factor)` while its site is alive. Each task carries a
//! hidden true runtime that decides when it completes; it never leaves this
//! module, so nothing downstream can peek at it.
//!
//! All mutation goes through `&mut self`, so the fabric is one serialized
//! state machine. Events at equal timestamps are dispatched in insertion
//! order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{transition, ModelError, SiteId, Task, TaskId, TaskState, VirtualTime};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum FabricError {
    #[error("site {0} is down")]
    SiteDown(SiteId),
    #[error("unknown site {0}")]
    UnknownSite(SiteId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("duplicate task {0}")]
    DuplicateTask(TaskId),
    #[error("duplicate site {0}")]
    DuplicateSite(SiteId),
    #[error("task {task}: illegal transition {from} -> {to}")]
    IllegalTransition { task: TaskId, from: TaskState, to: TaskState },
    #[error("no link {from} -> {to}")]
    NoLink { from: SiteId, to: SiteId },
    #[error("clock regression: now {now}, requested {until}")]
    ClockRegression { now: VirtualTime, until: VirtualTime },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl FabricError {
    fn illegal(task: &TaskId, err: ModelError) -> Self {
        match err {
            ModelError::IllegalTransition { from, to } => {
                FabricError::IllegalTransition { task: task.clone(), from, to }
            }
            other => FabricError::Invalid(other.to_string()),
        }
    }
}

pub type FabricResult<T> = Result<T, FabricError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub site_id: SiteId,
    pub cpu_slots: u32,
    #[serde(default)]
    pub load_factor: f64,
    #[serde(default)]
    pub cost_rate: f64,
    #[serde(default = "default_heartbeat")]
    pub heartbeat_interval: f64,
}

fn default_heartbeat() -> f64 {
    1.0
}

impl SiteSpec {
    pub fn new(site_id: impl Into<String>, cpu_slots: u32) -> Self {
        Self {
            site_id: SiteId::new(site_id),
            cpu_slots,
            load_factor: 0.0,
            cost_rate: 1.0,
            heartbeat_interval: default_heartbeat(),
        }
    }

    pub fn load(mut self, load_factor: f64) -> Self {
        self.load_factor = load_factor;
        self
    }

    pub fn cost(mut self, cost_rate: f64) -> Self {
        self.cost_rate = cost_rate;
        self
    }
}

/// Hidden per-task simulation inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub true_runtime: f64,
    /// The task fails once it has accrued this much wall-clock time.
    #[serde(default)]
    pub fails_at: Option<f64>,
    /// Size of the local output produced once the task has started.
    #[serde(default)]
    pub output_bytes: u64,
}

impl SimParams {
    pub fn runtime(true_runtime: f64) -> Self {
        Self { true_runtime, fails_at: None, output_bytes: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalFile {
    pub name: String,
    pub size_bytes: u64,
}

/// Job-control actions applied directly at a site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Control {
    Pause,
    Resume,
    Kill,
    SetPriority(i64),
}

/// Status as seen by an observer: either the task state, or unreachable
/// because the hosting site is down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Observed {
    State(TaskState),
    Unreachable,
}

impl fmt::Display for Observed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observed::State(s) => s.fmt(f),
            Observed::Unreachable => f.write_str("UNREACHABLE"),
        }
    }
}

impl Serialize for Observed {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Observed {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "UNREACHABLE" {
            Ok(Observed::Unreachable)
        } else {
            s.parse().map(Observed::State).map_err(serde::de::Error::custom)
        }
    }
}

/// One observable status change, in dispatch order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusChange {
    pub at: VirtualTime,
    pub task_id: TaskId,
    pub site_id: Option<SiteId>,
    pub old_status: Observed,
    pub new_status: Observed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLogRow {
    pub time: VirtualTime,
    pub kind: String,
    pub task: Option<TaskId>,
    pub site: Option<SiteId>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferTicket {
    pub transfer_id: u64,
    pub from_site: Option<SiteId>,
    pub to_site: SiteId,
    pub bytes: u64,
    pub started_at: VirtualTime,
    pub completes_at: VirtualTime,
}

/// One leg of a staged relocation: `bytes` pulled from `from` to the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferLeg {
    pub from: SiteId,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Extraction {
    pub task: Task,
    pub checkpoint: Option<f64>,
    pub local_files: Vec<LocalFile>,
}

/// Public view of a task: everything except the hidden simulation inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskView {
    pub task: Task,
    pub queue_position: Option<usize>,
    pub local_files: Vec<LocalFile>,
    pub reachable: bool,
    /// Virtual time at which the task last entered RUNNING at its current
    /// site, and its accrued time at that moment.
    pub segment_start: Option<(VirtualTime, f64)>,
    pub in_transit_to: Option<SiteId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiteSnapshot {
    pub site_id: SiteId,
    pub cpu_slots: u32,
    pub load_factor: f64,
    pub alive: bool,
    pub cost_rate: f64,
    pub heartbeat_interval: f64,
    pub last_heartbeat: Option<VirtualTime>,
    pub running: Vec<TaskView>,
    pub queue: Vec<TaskView>,
    pub paused: Vec<TaskView>,
    pub resume_pending: Vec<TaskId>,
}

impl SiteSnapshot {
    pub fn free_slots(&self) -> u32 {
        self.cpu_slots.saturating_sub(self.running.len() as u32)
    }

    pub fn resident(&self) -> impl Iterator<Item = &TaskView> {
        self.running.iter().chain(self.queue.iter()).chain(self.paused.iter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SiteHealth {
    pub alive: bool,
    pub heartbeat_interval: f64,
    pub last_heartbeat: Option<VirtualTime>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    Fail,
    Recover,
}

#[derive(Debug, Clone)]
enum EventKind {
    ProgressTick { n: u64 },
    TaskComplete { task: TaskId, generation: u64 },
    TransferComplete { transfer_id: u64 },
    Heartbeat { site: SiteId, generation: u64, n: u64 },
    SiteFail { site: SiteId },
    SiteRecover { site: SiteId },
    LoadChange { site: SiteId, load: f64 },
}

#[derive(Debug, Clone)]
struct Scheduled {
    at: VirtualTime,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Reversed so the max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone)]
struct Site {
    spec: SiteSpec,
    load_factor: f64,
    alive: bool,
    queue: Vec<TaskId>,
    running: BTreeSet<TaskId>,
    paused: BTreeSet<TaskId>,
    resume_pending: VecDeque<TaskId>,
    finished: BTreeSet<TaskId>,
    last_heartbeat: Option<VirtualTime>,
    hb_anchor: VirtualTime,
    hb_generation: u64,
}

impl Site {
    fn is_resident(&self, id: &TaskId) -> bool {
        self.running.contains(id) || self.paused.contains(id) || self.queue.contains(id)
    }
}

#[derive(Debug, Clone)]
struct SimTask {
    task: Task,
    params: SimParams,
    /// `(anchor_time, anchor_accrued, slowdown)` while accruing.
    accrual: Option<(VirtualTime, f64, f64)>,
    segment_start: Option<(VirtualTime, f64)>,
    generation: u64,
    local_files: Vec<LocalFile>,
    in_transit_to: Option<SiteId>,
}

impl SimTask {
    fn accrued_at(&self, now: VirtualTime) -> f64 {
        match self.accrual {
            Some((t0, a0, slowdown)) => a0 + (now - t0) / slowdown,
            None => self.task.wall_clock_accumulated,
        }
    }

    fn target(&self) -> f64 {
        match self.params.fails_at {
            Some(f) if f < self.params.true_runtime => f,
            _ => self.params.true_runtime,
        }
    }
}

#[derive(Debug, Clone)]
struct Relocation {
    task: TaskId,
    checkpoint: Option<f64>,
}

#[derive(Debug, Clone)]
struct PendingTransfer {
    ticket: TransferTicket,
    relocation: Option<Relocation>,
}

#[derive(Debug, Clone, Default)]
pub struct Fabric {
    now: VirtualTime,
    seq: u64,
    events: BinaryHeap<Scheduled>,
    sites: BTreeMap<SiteId, Site>,
    links: BTreeMap<(SiteId, SiteId), f64>,
    tasks: BTreeMap<TaskId, SimTask>,
    transfers: BTreeMap<u64, PendingTransfer>,
    next_transfer: u64,
    log: Vec<EventLogRow>,
    journal: Vec<StatusChange>,
    tick_interval: Option<f64>,
    tick_anchor: VirtualTime,
}

impl Fabric {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> VirtualTime {
        self.now
    }

    fn push(&mut self, at: VirtualTime, kind: EventKind) {
        self.seq += 1;
        self.events.push(Scheduled { at, seq: self.seq, kind });
    }

    fn log(&mut self, kind: &str, task: Option<&TaskId>, site: Option<&SiteId>, detail: String) {
        self.log.push(EventLogRow {
            time: self.now,
            kind: kind.to_string(),
            task: task.cloned(),
            site: site.cloned(),
            detail,
        });
    }

    fn record_status(&mut self, task: &TaskId, site: Option<&SiteId>, old: Observed, new: Observed) {
        if old == new {
            return;
        }
        self.log("status", Some(task), site, format!("{old}->{new}"));
        self.journal.push(StatusChange {
            at: self.now,
            task_id: task.clone(),
            site_id: site.cloned(),
            old_status: old,
            new_status: new,
        });
    }

    // ---- configuration -------------------------------------------------

    pub fn add_site(&mut self, spec: SiteSpec) -> FabricResult<()> {
        if self.sites.contains_key(&spec.site_id) {
            return Err(FabricError::DuplicateSite(spec.site_id));
        }
        if spec.cpu_slots == 0 {
            return Err(FabricError::Invalid(format!("site {} needs at least one slot", spec.site_id)));
        }
        if !(spec.load_factor >= 0.0) || !(spec.heartbeat_interval > 0.0) || !(spec.cost_rate >= 0.0) {
            return Err(FabricError::Invalid(format!("site {} has invalid parameters", spec.site_id)));
        }
        let id = spec.site_id.clone();
        self.sites.insert(
            id.clone(),
            Site {
                load_factor: spec.load_factor,
                spec,
                alive: true,
                queue: Vec::new(),
                running: BTreeSet::new(),
                paused: BTreeSet::new(),
                resume_pending: VecDeque::new(),
                finished: BTreeSet::new(),
                last_heartbeat: None,
                hb_anchor: self.now,
                hb_generation: 0,
            },
        );
        self.push(self.now, EventKind::Heartbeat { site: id, generation: 0, n: 0 });
        Ok(())
    }

    pub fn add_link(&mut self, from: SiteId, to: SiteId, bandwidth: f64) -> FabricResult<()> {
        for s in [&from, &to] {
            if !self.sites.contains_key(s) {
                return Err(FabricError::UnknownSite(s.clone()));
            }
        }
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(FabricError::Invalid(format!("bandwidth {from}->{to} must be positive")));
        }
        self.links.insert((from, to), bandwidth);
        Ok(())
    }

    pub fn bandwidth(&self, from: &SiteId, to: &SiteId) -> Option<f64> {
        self.links.get(&(from.clone(), to.clone())).copied()
    }

    pub fn links(&self) -> impl Iterator<Item = (&SiteId, &SiteId, f64)> {
        self.links.iter().map(|((a, b), bw)| (a, b, *bw))
    }

    pub fn schedule_load_change(&mut self, site: &SiteId, at: VirtualTime, load: f64) -> FabricResult<()> {
        self.site_ref(site)?;
        if !(load >= 0.0) {
            return Err(FabricError::Invalid(format!("negative load for {site}")));
        }
        self.push(at.max(self.now), EventKind::LoadChange { site: site.clone(), load });
        Ok(())
    }

    pub fn schedule_fault(&mut self, site: &SiteId, at: VirtualTime, fault: Fault) -> FabricResult<()> {
        self.site_ref(site)?;
        let kind = match fault {
            Fault::Fail => EventKind::SiteFail { site: site.clone() },
            Fault::Recover => EventKind::SiteRecover { site: site.clone() },
        };
        self.push(at.max(self.now), kind);
        Ok(())
    }

    /// Emit a `task_progress_tick` log row per running task every `interval`.
    pub fn set_progress_ticks(&mut self, interval: Option<f64>) {
        self.tick_interval = interval.filter(|i| *i > 0.0);
        self.tick_anchor = self.now;
        if let Some(i) = self.tick_interval {
            self.push(self.now + i, EventKind::ProgressTick { n: 1 });
        }
    }

    // ---- task admission --------------------------------------------------

    pub fn admit(&mut self, task: Task, params: SimParams) -> FabricResult<()> {
        if self.tasks.contains_key(&task.task_id) {
            return Err(FabricError::DuplicateTask(task.task_id));
        }
        if task.state != TaskState::Planned {
            return Err(FabricError::Invalid(format!("task {} must be admitted PLANNED", task.task_id)));
        }
        if !(params.true_runtime > 0.0) {
            return Err(FabricError::Invalid(format!("task {} needs a positive runtime", task.task_id)));
        }
        self.tasks.insert(
            task.task_id.clone(),
            SimTask {
                task,
                params,
                accrual: None,
                segment_start: None,
                generation: 0,
                local_files: Vec::new(),
                in_transit_to: None,
            },
        );
        Ok(())
    }

    /// Copy a task under a new id, fresh and PLANNED, with the same hidden
    /// inputs. Used to keep the original running next to a migrated copy.
    pub fn clone_task(&mut self, source: &TaskId, new_id: TaskId) -> FabricResult<Task> {
        let src = self.tasks.get(source).ok_or_else(|| FabricError::UnknownTask(source.clone()))?;
        let mut task = Task::new(new_id, src.task.job_id.clone(), src.task.attributes.clone());
        task.checkpointable = src.task.checkpointable;
        task.environment = src.task.environment.clone();
        task.submitted_estimate = src.task.submitted_estimate;
        let params = src.params.clone();
        self.admit(task.clone(), params)?;
        Ok(task)
    }

    pub fn set_submitted_estimate(&mut self, id: &TaskId, estimate: crate::model::Estimate) -> FabricResult<()> {
        let t = self.tasks.get_mut(id).ok_or_else(|| FabricError::UnknownTask(id.clone()))?;
        t.task.submitted_estimate = Some(estimate);
        Ok(())
    }

    // ---- queries -----------------------------------------------------------

    fn site_ref(&self, id: &SiteId) -> FabricResult<&Site> {
        self.sites.get(id).ok_or_else(|| FabricError::UnknownSite(id.clone()))
    }

    fn live_site(&self, id: &SiteId) -> FabricResult<&Site> {
        let site = self.site_ref(id)?;
        if !site.alive {
            return Err(FabricError::SiteDown(id.clone()));
        }
        Ok(site)
    }

    pub fn site_ids(&self) -> Vec<SiteId> {
        self.sites.keys().cloned().collect()
    }

    pub fn has_task(&self, id: &TaskId) -> bool {
        self.tasks.contains_key(id)
    }

    pub fn task(&self, id: &TaskId) -> Option<TaskView> {
        let st = self.tasks.get(id)?;
        let mut task = st.task.clone();
        task.wall_clock_accumulated = st.accrued_at(self.now);
        let site = task.assigned_site.as_ref().and_then(|s| self.sites.get(s));
        let queue_position = site.and_then(|s| s.queue.iter().position(|q| q == id));
        let reachable = match (site, task.state.is_terminal()) {
            (Some(s), false) => s.alive || !s.is_resident(id),
            _ => true,
        };
        Some(TaskView {
            task,
            queue_position,
            local_files: st.local_files.clone(),
            reachable,
            segment_start: st.segment_start,
            in_transit_to: st.in_transit_to.clone(),
        })
    }

    pub fn tasks(&self) -> Vec<TaskView> {
        self.tasks.keys().filter_map(|id| self.task(id)).collect()
    }

    pub fn site(&self, id: &SiteId) -> FabricResult<SiteSnapshot> {
        let s = self.site_ref(id)?;
        let view = |ids: &mut dyn Iterator<Item = &TaskId>| -> Vec<TaskView> {
            ids.filter_map(|t| self.task(t)).collect()
        };
        Ok(SiteSnapshot {
            site_id: id.clone(),
            cpu_slots: s.spec.cpu_slots,
            load_factor: s.load_factor,
            alive: s.alive,
            cost_rate: s.spec.cost_rate,
            heartbeat_interval: s.spec.heartbeat_interval,
            last_heartbeat: s.last_heartbeat,
            running: view(&mut s.running.iter()),
            queue: view(&mut s.queue.iter()),
            paused: view(&mut s.paused.iter()),
            resume_pending: s.resume_pending.iter().cloned().collect(),
        })
    }

    pub fn sites(&self) -> Vec<SiteSnapshot> {
        self.sites.keys().filter_map(|id| self.site(id).ok()).collect()
    }

    /// Liveness and heartbeat data of a site, without task views.
    pub fn site_health(&self, id: &SiteId) -> FabricResult<SiteHealth> {
        let s = self.site_ref(id)?;
        Ok(SiteHealth { alive: s.alive, heartbeat_interval: s.spec.heartbeat_interval, last_heartbeat: s.last_heartbeat })
    }

    /// Ids of tasks running, queued or paused at a site.
    pub fn resident_ids(&self, id: &SiteId) -> FabricResult<Vec<TaskId>> {
        let s = self.site_ref(id)?;
        Ok(s.running.iter().chain(s.queue.iter()).chain(s.paused.iter()).cloned().collect())
    }

    pub fn state_of(&self, id: &TaskId) -> Option<TaskState> {
        self.tasks.get(id).map(|t| t.task.state)
    }

    /// MOVING tasks with no site and no transfer under way.
    pub fn stranded(&self) -> Vec<TaskId> {
        self.tasks
            .iter()
            .filter(|(_, t)| t.task.state == TaskState::Moving && t.task.assigned_site.is_none() && t.in_transit_to.is_none())
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn last_heartbeat(&self, site: &SiteId) -> FabricResult<Option<VirtualTime>> {
        Ok(self.site_ref(site)?.last_heartbeat)
    }

    pub fn event_log(&self) -> &[EventLogRow] {
        &self.log
    }

    pub fn status_journal(&self) -> &[StatusChange] {
        &self.journal
    }

    pub fn event_log_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(["time", "kind", "task", "site", "detail"]).expect("in-memory write");
        for row in &self.log {
            w.write_record([
                row.time.to_string(),
                row.kind.clone(),
                row.task.as_ref().map(|t| t.0.clone()).unwrap_or_default(),
                row.site.as_ref().map(|s| s.0.clone()).unwrap_or_default(),
                row.detail.clone(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    // ---- internals -------------------------------------------------------

    fn slowdown_for(&self, id: &TaskId) -> Option<f64> {
        let st = self.tasks.get(id)?;
        if st.task.state != TaskState::Running {
            return None;
        }
        let site = self.sites.get(st.task.assigned_site.as_ref()?)?;
        site.alive.then_some(1.0 + site.load_factor)
    }

    /// Freeze accrued time at `now` and restart the accrual segment with the
    /// current rate, rescheduling completion.
    fn reanchor(&mut self, id: &TaskId) {
        let now = self.now;
        let slowdown = self.slowdown_for(id);
        let Some(st) = self.tasks.get_mut(id) else { return };
        let accrued = st.accrued_at(now);
        st.task.wall_clock_accumulated = accrued;
        st.generation += 1;
        st.accrual = slowdown.map(|s| (now, accrued, s));
        if let Some(s) = slowdown {
            let remaining = (st.target() - accrued).max(0.0);
            let at = now + remaining * s;
            let generation = st.generation;
            self.push(at, EventKind::TaskComplete { task: id.clone(), generation });
        }
    }

    fn set_state(&mut self, id: &TaskId, to: TaskState) -> FabricResult<()> {
        let now = self.now;
        let st = self.tasks.get_mut(id).ok_or_else(|| FabricError::UnknownTask(id.clone()))?;
        let from = st.task.state;
        let accrued = st.accrued_at(now);
        let mut task = st.task.clone();
        task.wall_clock_accumulated = accrued;
        let task = transition(task, to, now).map_err(|e| FabricError::illegal(id, e))?;
        st.task = task;
        if to == TaskState::Running {
            st.segment_start = Some((now, accrued));
            if st.local_files.is_empty() {
                st.local_files.push(LocalFile {
                    name: format!("{}.out", id),
                    size_bytes: st.params.output_bytes,
                });
            }
        }
        let site = st.task.assigned_site.clone();
        self.reanchor(id);
        self.record_status(id, site.as_ref(), Observed::State(from), Observed::State(to));
        Ok(())
    }

    /// Start resume-pending tasks, then queue heads, while slots are free.
    fn fill_slots(&mut self, site_id: &SiteId) {
        loop {
            let Some(site) = self.sites.get_mut(site_id) else { return };
            if !site.alive || site.running.len() as u32 >= site.spec.cpu_slots {
                return;
            }
            let next = if let Some(id) = site.resume_pending.pop_front() {
                site.paused.remove(&id);
                id
            } else if !site.queue.is_empty() {
                site.queue.remove(0)
            } else {
                return;
            };
            site.running.insert(next.clone());
            self.set_state(&next, TaskState::Running).expect("queued/paused tasks may start");
        }
    }

    fn insert_sorted(&mut self, site_id: &SiteId, id: &TaskId) -> usize {
        let tasks = &self.tasks;
        let site = self.sites.get_mut(site_id).expect("caller checked site");
        let key = tasks[id].task.queue_key();
        let pos = site.queue.partition_point(|q| tasks[q].task.queue_key() < key);
        site.queue.insert(pos, id.clone());
        pos
    }

    fn resident_site(&self, site_id: &SiteId, id: &TaskId) -> FabricResult<()> {
        let site = self.site_ref(site_id)?;
        if !self.tasks.contains_key(id) {
            return Err(FabricError::UnknownTask(id.clone()));
        }
        if site.is_resident(id) || site.finished.contains(id) {
            Ok(())
        } else {
            Err(FabricError::UnknownTask(id.clone()))
        }
    }

    fn detach(&mut self, site_id: &SiteId, id: &TaskId) {
        if let Some(site) = self.sites.get_mut(site_id) {
            site.queue.retain(|q| q != id);
            site.running.remove(id);
            site.paused.remove(id);
            site.resume_pending.retain(|q| q != id);
            site.finished.remove(id);
        }
    }

    // ---- operations ------------------------------------------------------

    /// Insert a PLANNED, MOVING or unassigned QUEUED task into a site's
    /// queue; returns its 0-based position at insertion.
    pub fn enqueue(&mut self, site_id: &SiteId, id: &TaskId) -> FabricResult<usize> {
        self.live_site(site_id)?;
        let st = self.tasks.get(id).ok_or_else(|| FabricError::UnknownTask(id.clone()))?;
        if st.task.assigned_site.is_some() && !st.task.state.is_terminal() && st.task.state != TaskState::Moving
            || st.in_transit_to.is_some()
        {
            return Err(FabricError::DuplicateTask(id.clone()));
        }
        match st.task.state {
            TaskState::Planned | TaskState::Moving => {}
            TaskState::Queued if st.task.assigned_site.is_none() => {}
            from => {
                return Err(FabricError::IllegalTransition { task: id.clone(), from, to: TaskState::Queued });
            }
        }
        if st.task.state != TaskState::Queued {
            self.tasks.get_mut(id).expect("present").task.assigned_site = Some(site_id.clone());
            self.set_state(id, TaskState::Queued)?;
        } else {
            self.tasks.get_mut(id).expect("present").task.assigned_site = Some(site_id.clone());
        }
        let pos = self.insert_sorted(site_id, id);
        self.log("enqueue", Some(id), Some(site_id), format!("position={pos}"));
        self.fill_slots(site_id);
        Ok(pos)
    }

    pub fn advance(&mut self, until: VirtualTime) -> FabricResult<Vec<StatusChange>> {
        if until < self.now {
            return Err(FabricError::ClockRegression { now: self.now, until });
        }
        let start = self.journal.len();
        while self.events.peek().is_some_and(|e| e.at <= until) {
            let ev = self.events.pop().expect("peeked");
            self.now = self.now.max(ev.at);
            self.dispatch(ev.kind);
        }
        self.now = until;
        Ok(self.journal[start..].to_vec())
    }

    /// Time of the next pending event, if any.
    pub fn next_event_time(&self) -> Option<VirtualTime> {
        self.events.peek().map(|e| e.at)
    }

    fn dispatch(&mut self, kind: EventKind) {
        match kind {
            EventKind::ProgressTick { n } => {
                let ids: Vec<TaskId> = self
                    .tasks
                    .iter()
                    .filter(|(_, t)| t.task.state == TaskState::Running)
                    .map(|(id, _)| id.clone())
                    .collect();
                for id in ids {
                    let st = &self.tasks[&id];
                    let accrued = st.accrued_at(self.now);
                    let site = st.task.assigned_site.clone();
                    self.log("task_progress_tick", Some(&id), site.as_ref(), format!("accrued={accrued}"));
                }
                if let Some(i) = self.tick_interval {
                    self.push(self.tick_anchor + i * (n + 1) as f64, EventKind::ProgressTick { n: n + 1 });
                }
            }
            EventKind::TaskComplete { task, generation } => {
                let Some(st) = self.tasks.get(&task) else { return };
                if st.generation != generation || st.task.state != TaskState::Running {
                    return;
                }
                let failed = st.params.fails_at.is_some_and(|f| f < st.params.true_runtime);
                let target = st.target();
                let site = st.task.assigned_site.clone().expect("running task has a site");
                {
                    let st = self.tasks.get_mut(&task).expect("present");
                    st.accrual = None;
                    st.task.wall_clock_accumulated = target;
                }
                let outcome = if failed { TaskState::Failed } else { TaskState::Completed };
                self.log("task_complete", Some(&task), Some(&site), outcome.to_string());
                if let Some(s) = self.sites.get_mut(&site) {
                    s.running.remove(&task);
                    s.finished.insert(task.clone());
                }
                self.set_state(&task, outcome).expect("running task may finish");
                self.fill_slots(&site);
            }
            EventKind::TransferComplete { transfer_id } => {
                let Some(pending) = self.transfers.remove(&transfer_id) else { return };
                let to = pending.ticket.to_site.clone();
                self.log(
                    "transfer_complete",
                    pending.relocation.as_ref().map(|r| &r.task),
                    Some(&to),
                    format!("transfer={} bytes={}", transfer_id, pending.ticket.bytes),
                );
                if let Some(reloc) = pending.relocation {
                    self.deliver(reloc, &to);
                }
            }
            EventKind::Heartbeat { site, generation, n } => {
                let Some(s) = self.sites.get_mut(&site) else { return };
                if !s.alive || s.hb_generation != generation {
                    return;
                }
                s.last_heartbeat = Some(self.now);
                let next = s.hb_anchor + s.spec.heartbeat_interval * (n + 1) as f64;
                self.log("heartbeat", None, Some(&site), String::new());
                self.push(next, EventKind::Heartbeat { site, generation, n: n + 1 });
            }
            EventKind::SiteFail { site } => {
                let _ = self.fail_site(&site);
            }
            EventKind::SiteRecover { site } => {
                let _ = self.recover_site(&site);
            }
            EventKind::LoadChange { site, load } => {
                let Some(s) = self.sites.get_mut(&site) else { return };
                s.load_factor = load;
                let running: Vec<TaskId> = s.running.iter().cloned().collect();
                self.log("load_change", None, Some(&site), format!("load={load}"));
                for id in running {
                    self.reanchor(&id);
                }
            }
        }
    }

    fn deliver(&mut self, reloc: Relocation, to: &SiteId) {
        let id = reloc.task;
        let Some(st) = self.tasks.get_mut(&id) else { return };
        st.in_transit_to = None;
        if st.task.state.is_terminal() {
            return;
        }
        st.task.wall_clock_accumulated = reloc.checkpoint.unwrap_or(0.0);
        st.accrual = None;
        st.segment_start = None;
        if let Err(e) = self.enqueue(to, &id) {
            self.log("undeliverable", Some(&id), Some(to), e.to_string());
        }
    }

    pub fn control(&mut self, site_id: &SiteId, id: &TaskId, action: Control) -> FabricResult<Task> {
        self.live_site(site_id)?;
        self.resident_site(site_id, id)?;
        let state = self.tasks[id].task.state;
        match action {
            Control::Pause => {
                if state != TaskState::Running {
                    return Err(FabricError::IllegalTransition { task: id.clone(), from: state, to: TaskState::Paused });
                }
                let site = self.sites.get_mut(site_id).expect("checked");
                site.running.remove(id);
                site.paused.insert(id.clone());
                self.set_state(id, TaskState::Paused)?;
                self.fill_slots(site_id);
            }
            Control::Resume => {
                if state != TaskState::Paused {
                    return Err(FabricError::IllegalTransition { task: id.clone(), from: state, to: TaskState::Running });
                }
                let site = self.sites.get_mut(site_id).expect("checked");
                if !site.resume_pending.contains(id) {
                    site.resume_pending.push_back(id.clone());
                }
                self.fill_slots(site_id);
            }
            Control::Kill => {
                if state.is_terminal() {
                    return Err(FabricError::IllegalTransition { task: id.clone(), from: state, to: TaskState::Killed });
                }
                self.detach(site_id, id);
                self.sites.get_mut(site_id).expect("checked").finished.insert(id.clone());
                self.set_state(id, TaskState::Killed)?;
                self.fill_slots(site_id);
            }
            Control::SetPriority(p) => {
                if state.is_terminal() {
                    return Err(FabricError::IllegalTransition { task: id.clone(), from: state, to: state });
                }
                self.tasks.get_mut(id).expect("present").task.attributes.priority = p;
                let site = self.sites.get_mut(site_id).expect("checked");
                if site.queue.contains(id) {
                    site.queue.retain(|q| q != id);
                    self.insert_sorted(site_id, id);
                }
                self.log("set_priority", Some(id), Some(site_id), format!("priority={p}"));
            }
        }
        self.log("control", Some(id), Some(site_id), format!("{action:?}"));
        Ok(self.task(id).expect("present").task)
    }

    /// Remove a task from a live site for migration. Checkpointable tasks
    /// carry their accrued time.
    pub fn extract_task(&mut self, site_id: &SiteId, id: &TaskId) -> FabricResult<Extraction> {
        self.live_site(site_id)?;
        self.resident_site(site_id, id)?;
        let state = self.tasks[id].task.state;
        if !matches!(state, TaskState::Queued | TaskState::Running | TaskState::Paused | TaskState::Failed) {
            return Err(FabricError::IllegalTransition { task: id.clone(), from: state, to: TaskState::Moving });
        }
        let accrued = self.tasks[id].accrued_at(self.now);
        self.detach(site_id, id);
        if state != TaskState::Failed {
            self.set_state(id, TaskState::Moving)?;
        }
        let st = self.tasks.get_mut(id).expect("present");
        st.task.wall_clock_accumulated = accrued;
        st.accrual = None;
        st.segment_start = None;
        if state != TaskState::Failed {
            st.task.assigned_site = None;
        }
        let checkpoint = (st.task.checkpointable && accrued > 0.0).then_some(accrued);
        let extraction = Extraction { task: st.task.clone(), checkpoint, local_files: st.local_files.clone() };
        self.log("extract", Some(id), Some(site_id), format!("checkpoint={checkpoint:?}"));
        self.fill_slots(site_id);
        Ok(extraction)
    }

    /// Drop a non-terminal task from a (typically dead) site without
    /// contacting it; nothing is recovered.
    pub fn abandon_task(&mut self, site_id: &SiteId, id: &TaskId) -> FabricResult<Task> {
        self.site_ref(site_id)?;
        let site = &self.sites[site_id];
        if !site.is_resident(id) {
            return Err(FabricError::UnknownTask(id.clone()));
        }
        let was_reachable = site.alive;
        let from = self.tasks[id].task.state;
        self.detach(site_id, id);
        // Report the last reachable status as the origin of the move.
        let st = self.tasks.get_mut(id).expect("present");
        st.accrual = None;
        st.segment_start = None;
        let task = transition(st.task.clone(), TaskState::Moving, self.now).map_err(|e| FabricError::illegal(id, e))?;
        st.task = task;
        st.task.assigned_site = None;
        let old = if was_reachable { Observed::State(from) } else { Observed::Unreachable };
        self.record_status(id, Some(site_id), old, Observed::State(TaskState::Moving));
        self.log("abandon", Some(id), Some(site_id), String::new());
        if was_reachable {
            self.fill_slots(site_id);
        }
        Ok(self.tasks[id].task.clone())
    }

    /// Kill a task that is not resident at any site: PLANNED, or MOVING
    /// (parked or in transit, in which case the delivery is dropped).
    pub fn cancel(&mut self, id: &TaskId) -> FabricResult<Task> {
        let st = self.tasks.get(id).ok_or_else(|| FabricError::UnknownTask(id.clone()))?;
        let state = st.task.state;
        let placed = st.task.assigned_site.as_ref().is_some_and(|s| self.sites[s].is_resident(id));
        if placed || !matches!(state, TaskState::Planned | TaskState::Moving) {
            return Err(FabricError::IllegalTransition { task: id.clone(), from: state, to: TaskState::Killed });
        }
        self.set_state(id, TaskState::Killed)?;
        self.log("cancel", Some(id), None, String::new());
        Ok(self.tasks[id].task.clone())
    }

    fn transfer_duration(&self, from: &SiteId, to: &SiteId, bytes: u64) -> FabricResult<f64> {
        if from == to || bytes == 0 {
            self.site_ref(from)?;
            return Ok(0.0);
        }
        let bw = self
            .bandwidth(from, to)
            .ok_or_else(|| FabricError::NoLink { from: from.clone(), to: to.clone() })?;
        Ok(bytes as f64 / bw)
    }

    pub fn transfer(&mut self, from: &SiteId, to: &SiteId, bytes: u64) -> FabricResult<TransferTicket> {
        self.site_ref(to)?;
        let duration = self.transfer_duration(from, to, bytes)?;
        Ok(self.start_transfer(Some(from.clone()), to.clone(), bytes, duration, None))
    }

    fn start_transfer(
        &mut self,
        from: Option<SiteId>,
        to: SiteId,
        bytes: u64,
        duration: f64,
        relocation: Option<Relocation>,
    ) -> TransferTicket {
        self.next_transfer += 1;
        let ticket = TransferTicket {
            transfer_id: self.next_transfer,
            from_site: from,
            to_site: to,
            bytes,
            started_at: self.now,
            completes_at: self.now + duration,
        };
        self.transfers.insert(ticket.transfer_id, PendingTransfer { ticket: ticket.clone(), relocation });
        self.push(ticket.completes_at, EventKind::TransferComplete { transfer_id: ticket.transfer_id });
        ticket
    }

    /// Stage a PLANNED or MOVING task to `to`: legs are transferred
    /// sequentially, then the task is enqueued with its checkpoint (or from
    /// zero). Zero-length staging enqueues immediately.
    pub fn relocate(
        &mut self,
        id: &TaskId,
        to: &SiteId,
        checkpoint: Option<f64>,
        legs: &[TransferLeg],
    ) -> FabricResult<TransferTicket> {
        self.live_site(to)?;
        let st = self.tasks.get(id).ok_or_else(|| FabricError::UnknownTask(id.clone()))?;
        if !matches!(st.task.state, TaskState::Planned | TaskState::Moving)
            || st.task.assigned_site.is_some() && st.task.state == TaskState::Moving
            || st.in_transit_to.is_some()
        {
            return Err(FabricError::IllegalTransition { task: id.clone(), from: st.task.state, to: TaskState::Queued });
        }
        let mut duration = 0.0;
        let mut bytes = 0;
        for leg in legs {
            duration += self.transfer_duration(&leg.from, to, leg.bytes)?;
            bytes += leg.bytes;
        }
        let reloc = Relocation { task: id.clone(), checkpoint };
        let st = self.tasks.get_mut(id).expect("present");
        st.in_transit_to = Some(to.clone());
        // in flight the task holds only what it will resume with
        st.task.wall_clock_accumulated = checkpoint.unwrap_or(0.0);
        self.log("relocate", Some(id), Some(to), format!("bytes={bytes} duration={duration}"));
        if duration == 0.0 {
            self.next_transfer += 1;
            let ticket = TransferTicket {
                transfer_id: self.next_transfer,
                from_site: None,
                to_site: to.clone(),
                bytes,
                started_at: self.now,
                completes_at: self.now,
            };
            self.deliver(reloc, to);
            return Ok(ticket);
        }
        Ok(self.start_transfer(None, to.clone(), bytes, duration, Some(reloc)))
    }

    pub fn fail_site(&mut self, site_id: &SiteId) -> FabricResult<()> {
        let site = self.sites.get_mut(site_id).ok_or_else(|| FabricError::UnknownSite(site_id.clone()))?;
        if !site.alive {
            return Ok(());
        }
        site.alive = false;
        site.hb_generation += 1;
        let resident: BTreeSet<TaskId> =
            site.running.iter().chain(site.paused.iter()).chain(site.queue.iter()).cloned().collect();
        let running: Vec<TaskId> = site.running.iter().cloned().collect();
        self.log("site_fail", None, Some(site_id), format!("resident={}", resident.len()));
        for id in &running {
            self.reanchor(id);
        }
        for id in resident {
            let state = self.tasks[&id].task.state;
            self.record_status(&id, Some(site_id), Observed::State(state), Observed::Unreachable);
        }
        Ok(())
    }

    pub fn recover_site(&mut self, site_id: &SiteId) -> FabricResult<()> {
        let now = self.now;
        let site = self.sites.get_mut(site_id).ok_or_else(|| FabricError::UnknownSite(site_id.clone()))?;
        if site.alive {
            return Ok(());
        }
        site.alive = true;
        site.hb_generation += 1;
        site.hb_anchor = now;
        let generation = site.hb_generation;
        let resident: BTreeSet<TaskId> =
            site.running.iter().chain(site.paused.iter()).chain(site.queue.iter()).cloned().collect();
        let running: Vec<TaskId> = site.running.iter().cloned().collect();
        self.log("site_recover", None, Some(site_id), format!("resident={}", resident.len()));
        self.push(now, EventKind::Heartbeat { site: site_id.clone(), generation, n: 0 });
        for id in &running {
            self.reanchor(id);
        }
        for id in resident {
            let state = self.tasks[&id].task.state;
            self.record_status(&id, Some(site_id), Observed::Unreachable, Observed::State(state));
        }
        self.fill_slots(site_id);
        Ok(())
    }
}
