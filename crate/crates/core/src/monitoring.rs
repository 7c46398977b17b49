//! Job monitoring: a collector that follows the fabric's status journal, a
//! store of terminal task records consulted before the collector, and a
//! sequenced event feed.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::estimate_runtime;
use crate::fabric::{Fabric, Observed, TaskView};
use crate::history::{append_line, read_lines, HistoryStore};
use crate::model::{JobId, SiteId, TaskId, TaskState, VirtualTime};

pub const DEFAULT_RETENTION: usize = 10_000;
pub const DEFAULT_SYNC_INTERVAL: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonitorError {
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("fabric unreachable")]
    FabricUnreachable,
    #[error("sequence {requested} is before the retained feed (oldest retained {oldest})")]
    SeqExpired { requested: u64, oldest: u64 },
    #[error("monitoring store: {0}")]
    Io(String),
}

impl From<std::io::Error> for MonitorError {
    fn from(e: std::io::Error) -> Self {
        MonitorError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitoringRecord {
    pub task_id: TaskId,
    pub job_id: JobId,
    pub site_id: Option<SiteId>,
    pub status: Observed,
    pub remaining_time: Option<f64>,
    pub elapsed_time: f64,
    pub estimated_run_time: Option<f64>,
    pub queue_position: Option<usize>,
    pub priority: i64,
    pub submission_time: Option<VirtualTime>,
    pub execution_time: Option<VirtualTime>,
    pub completion_time: Option<VirtualTime>,
    pub cpu_time_used: f64,
    pub input_io_bytes: u64,
    pub output_io_bytes: u64,
    pub owner: String,
    pub environment: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitoringEvent {
    pub seq: u64,
    pub at: VirtualTime,
    pub task_id: TaskId,
    pub old_status: Observed,
    pub new_status: Observed,
    pub site_id: Option<SiteId>,
}

fn record_from_view(view: &TaskView, estimate: Option<f64>) -> MonitoringRecord {
    let t = &view.task;
    let status = if view.reachable { Observed::State(t.state) } else { Observed::Unreachable };
    let elapsed = t.wall_clock_accumulated;
    MonitoringRecord {
        task_id: t.task_id.clone(),
        job_id: t.job_id.clone(),
        site_id: t.assigned_site.clone(),
        status,
        remaining_time: estimate.map(|e| (e - elapsed).max(0.0)),
        elapsed_time: elapsed,
        estimated_run_time: estimate,
        queue_position: if status == Observed::State(TaskState::Queued) { view.queue_position } else { None },
        priority: t.attributes.priority,
        submission_time: t.submit_time,
        execution_time: t.start_time,
        completion_time: t.completion_time,
        cpu_time_used: elapsed,
        input_io_bytes: t.attributes.input_bytes(),
        output_io_bytes: view.local_files.iter().map(|f| f.size_bytes).sum(),
        owner: t.attributes.user.clone(),
        environment: t.environment.clone(),
    }
}

pub struct Monitor {
    cursor: usize,
    next_seq: u64,
    retention: usize,
    feed: VecDeque<MonitoringEvent>,
    store: BTreeMap<TaskId, MonitoringRecord>,
    collector_online: bool,
    collector_calls: Mutex<BTreeMap<TaskId, u64>>,
    dir: Option<PathBuf>,
    events_log: Option<File>,
    store_log: Option<File>,
}

impl Default for Monitor {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl Monitor {
    pub fn in_memory() -> Self {
        Self {
            cursor: 0,
            next_seq: 1,
            retention: DEFAULT_RETENTION,
            feed: VecDeque::new(),
            store: BTreeMap::new(),
            collector_online: true,
            collector_calls: Mutex::new(BTreeMap::new()),
            dir: None,
            events_log: None,
            store_log: None,
        }
    }

    /// A monitor whose feed and store are also written under `dir`. The
    /// logs describe one run and are truncated on open.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, MonitorError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let create = |name: &str| OpenOptions::new().create(true).write(true).truncate(true).open(dir.join(name));
        let mut m = Self::in_memory();
        m.events_log = Some(create("monitoring_events.log")?);
        m.store_log = Some(create("monitoring_store.log")?);
        m.dir = Some(dir);
        Ok(m)
    }

    pub fn with_retention(mut self, retention: usize) -> Self {
        self.retention = retention.max(1);
        self
    }

    pub fn set_collector_online(&mut self, online: bool) {
        self.collector_online = online;
    }

    pub fn collector_online(&self) -> bool {
        self.collector_online
    }

    /// How many times the collector has been asked about `task`.
    fn calls(&self) -> MutexGuard<'_, BTreeMap<TaskId, u64>> {
        self.collector_calls.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn collector_calls(&self, task: &TaskId) -> u64 {
        self.calls().get(task).copied().unwrap_or(0)
    }

    pub fn total_collector_calls(&self) -> u64 {
        self.calls().values().sum()
    }

    /// Highest sequence number issued so far (0 before any event).
    pub fn last_seq(&self) -> u64 {
        self.next_seq - 1
    }

    pub fn stored(&self, task: &TaskId) -> Option<&MonitoringRecord> {
        self.store.get(task)
    }

    /// Pull status changes from the fabric since the last sync: one event
    /// per change, and a store write per task that reached a terminal
    /// state. Returns the number of store writes.
    pub fn collector_sync(&mut self, fabric: &Fabric, history: &HistoryStore) -> Result<usize, MonitorError> {
        if !self.collector_online {
            return Err(MonitorError::FabricUnreachable);
        }
        let journal = fabric.status_journal();
        let fresh = &journal[self.cursor.min(journal.len())..];
        let mut terminal = Vec::new();
        for change in fresh {
            let event = MonitoringEvent {
                seq: self.next_seq,
                at: change.at,
                task_id: change.task_id.clone(),
                old_status: change.old_status,
                new_status: change.new_status,
                site_id: change.site_id.clone(),
            };
            self.next_seq += 1;
            if let Some(f) = self.events_log.as_mut() {
                append_line(f, &event)?;
            }
            self.feed.push_back(event);
            if self.feed.len() > self.retention {
                self.feed.pop_front();
            }
            if matches!(change.new_status, Observed::State(s) if s.is_terminal()) {
                terminal.push(change.task_id.clone());
            }
        }
        self.cursor = journal.len();
        terminal.sort();
        terminal.dedup();
        let mut writes = 0;
        for id in terminal {
            let Some(view) = fabric.task(&id) else { continue };
            let record = record_from_view(&view, submitted(&view, history));
            if let Some(f) = self.store_log.as_mut() {
                append_line(f, &record)?;
            }
            self.store.insert(id, record);
            writes += 1;
        }
        Ok(writes)
    }

    /// Status of one task. Terminal tasks already synced come from the
    /// store; others are read from the fabric. With `refresh` the
    /// estimated run time is recomputed from history instead of using the
    /// estimate recorded at submission.
    pub fn query(
        &self,
        fabric: &Fabric,
        history: &HistoryStore,
        task: &TaskId,
        refresh: bool,
    ) -> Result<MonitoringRecord, MonitorError> {
        if let Some(rec) = self.store.get(task) {
            return Ok(self.with_refresh(rec.clone(), fabric, history, refresh));
        }
        if !self.collector_online {
            return Err(MonitorError::FabricUnreachable);
        }
        *self.calls().entry(task.clone()).or_insert(0) += 1;
        let view = fabric.task(task).ok_or_else(|| MonitorError::UnknownTask(task.clone()))?;
        let estimate = if refresh { fresh(&view, history) } else { submitted(&view, history) };
        Ok(record_from_view(&view, estimate))
    }

    fn with_refresh(&self, mut rec: MonitoringRecord, fabric: &Fabric, history: &HistoryStore, refresh: bool) -> MonitoringRecord {
        if refresh {
            if let Some(view) = fabric.task(&rec.task_id) {
                rec.estimated_run_time = fresh(&view, history);
                rec.remaining_time = rec.estimated_run_time.map(|e| (e - rec.elapsed_time).max(0.0));
            }
        }
        rec
    }

    /// Records for every task the fabric knows, optionally restricted to one
    /// job, in task id order.
    pub fn list(
        &self,
        fabric: &Fabric,
        history: &HistoryStore,
        job: Option<&JobId>,
    ) -> Result<Vec<MonitoringRecord>, MonitorError> {
        let mut out = Vec::new();
        for view in fabric.tasks() {
            if job.is_some_and(|j| *j != view.task.job_id) {
                continue;
            }
            out.push(self.query(fabric, history, &view.task.task_id, false)?);
        }
        Ok(out)
    }

    /// Retained events with `seq > from_seq`, in order. Events older than
    /// the in-memory window are read back from the persistent log when
    /// there is one.
    pub fn subscribe(&self, from_seq: u64) -> Result<Vec<MonitoringEvent>, MonitorError> {
        let oldest = self.feed.front().map_or(self.next_seq, |e| e.seq);
        if from_seq + 1 >= oldest {
            return Ok(self.feed.iter().filter(|e| e.seq > from_seq).cloned().collect());
        }
        let Some(dir) = self.dir.as_ref() else {
            return Err(MonitorError::SeqExpired { requested: from_seq, oldest });
        };
        let all: Vec<MonitoringEvent> = read_lines(&dir.join("monitoring_events.log"))?;
        Ok(all.into_iter().filter(|e| e.seq > from_seq).collect())
    }
}

fn submitted(view: &TaskView, history: &HistoryStore) -> Option<f64> {
    view.task
        .submitted_estimate
        .or_else(|| history.lookup_estimate(&view.task.task_id))
        .map(|e| e.value)
}

fn fresh(view: &TaskView, history: &HistoryStore) -> Option<f64> {
    estimate_runtime(history, &view.task.attributes).ok().map(|e| e.value).or_else(|| submitted(view, history))
}
