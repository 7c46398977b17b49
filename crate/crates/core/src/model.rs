//! Domain types shared by every service: tasks, jobs, plans, estimates and
//! the task lifecycle state machine.
//!
//! All timestamps are virtual seconds (`f64`). Every type serializes to a
//! flat key-value document whose field names are the ones used on the wire
//! and in the store logs.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Virtual timestamp in seconds.
pub type VirtualTime = f64;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

string_id!(
    /// Unique task identifier.
    TaskId
);
string_id!(
    /// Unique job identifier.
    JobId
);
string_id!(
    /// Execution site identifier.
    SiteId
);

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelError {
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: TaskState, to: TaskState },
    #[error("actual runtime must be positive")]
    ZeroActualRuntime,
    #[error("empty evaluation list")]
    EmptyList,
    #[error("invalid task attributes: {0}")]
    InvalidAttributes(String),
    #[error("invalid job: {0}")]
    InvalidJob(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobType {
    Batch,
    Interactive,
}

impl fmt::Display for JobType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JobType::Batch => "batch",
            JobType::Interactive => "interactive",
        })
    }
}

impl std::str::FromStr for JobType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "batch" => Ok(JobType::Batch),
            "interactive" => Ok(JobType::Interactive),
            other => Err(format!("unknown job type `{other}`")),
        }
    }
}

/// A logical input file. `home_site` is where the file lives; files without
/// a home are assumed to be present everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub name: String,
    pub size_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub home_site: Option<SiteId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAttributes {
    pub user: String,
    pub account: String,
    pub queue_name: String,
    pub partition: String,
    pub job_type: JobType,
    pub nodes: u32,
    pub requested_cpu_hours: f64,
    #[serde(default)]
    pub input_files: Vec<InputFile>,
    #[serde(default)]
    pub priority: i64,
}

impl TaskAttributes {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.nodes < 1 {
            return Err(ModelError::InvalidAttributes("nodes must be >= 1".into()));
        }
        if !(self.requested_cpu_hours >= 0.0) || !self.requested_cpu_hours.is_finite() {
            return Err(ModelError::InvalidAttributes(
                "requested_cpu_hours must be a finite non-negative number".into(),
            ));
        }
        Ok(())
    }

    pub fn input_bytes(&self) -> u64 {
        self.input_files.iter().map(|f| f.size_bytes).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskState {
    Planned,
    Queued,
    Running,
    Paused,
    Completed,
    Failed,
    Killed,
    Moving,
}

impl TaskState {
    pub const ALL: [TaskState; 8] = [
        TaskState::Planned,
        TaskState::Queued,
        TaskState::Running,
        TaskState::Paused,
        TaskState::Completed,
        TaskState::Failed,
        TaskState::Killed,
        TaskState::Moving,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Completed | TaskState::Failed | TaskState::Killed)
    }

    /// Whether the lifecycle permits moving from `self` to `to`.
    pub fn can_transition_to(self, to: TaskState) -> bool {
        use TaskState::*;
        match (self, to) {
            (Planned, Queued)
            | (Queued, Running)
            | (Running, Completed | Failed | Killed)
            | (Running, Paused)
            | (Paused, Running)
            | (Queued | Running | Paused, Moving)
            | (Moving, Queued) => true,
            (from, Killed) => !from.is_terminal(),
            _ => false,
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskState::Planned => "PLANNED",
            TaskState::Queued => "QUEUED",
            TaskState::Running => "RUNNING",
            TaskState::Paused => "PAUSED",
            TaskState::Completed => "COMPLETED",
            TaskState::Failed => "FAILED",
            TaskState::Killed => "KILLED",
            TaskState::Moving => "MOVING",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for TaskState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskState::ALL
            .into_iter()
            .find(|st| st.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown task state `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: TaskId,
    pub job_id: JobId,
    pub attributes: TaskAttributes,
    pub state: TaskState,
    pub submit_time: Option<VirtualTime>,
    pub start_time: Option<VirtualTime>,
    pub completion_time: Option<VirtualTime>,
    /// CPU-attributed progress of the current attempt. Never decreases
    /// while the task lives at one site; a migration without checkpoint
    /// starts a new attempt from zero.
    pub wall_clock_accumulated: f64,
    pub assigned_site: Option<SiteId>,
    pub submitted_estimate: Option<Estimate>,
    pub checkpointable: bool,
    #[serde(default)]
    pub environment: BTreeMap<String, String>,
}

impl Task {
    pub fn new(task_id: TaskId, job_id: JobId, attributes: TaskAttributes) -> Self {
        Self {
            task_id,
            job_id,
            attributes,
            state: TaskState::Planned,
            submit_time: None,
            start_time: None,
            completion_time: None,
            wall_clock_accumulated: 0.0,
            assigned_site: None,
            submitted_estimate: None,
            checkpointable: false,
            environment: BTreeMap::new(),
        }
    }

    pub fn checkpointable(mut self, yes: bool) -> Self {
        self.checkpointable = yes;
        self
    }

    /// Adds CPU-attributed progress. Only a RUNNING task accrues.
    pub fn accrue(&mut self, seconds: f64) {
        if self.state == TaskState::Running && seconds > 0.0 {
            self.wall_clock_accumulated += seconds;
        }
    }

    pub fn queue_key(&self) -> QueueKey<'_> {
        QueueKey {
            priority: self.attributes.priority,
            submit_time: self.submit_time.unwrap_or(0.0),
            task_id: &self.task_id,
        }
    }
}

/// Apply a lifecycle transition at virtual time `now`.
pub fn transition(mut task: Task, to: TaskState, now: VirtualTime) -> Result<Task, ModelError> {
    if !task.state.can_transition_to(to) {
        return Err(ModelError::IllegalTransition { from: task.state, to });
    }
    match to {
        TaskState::Queued if task.submit_time.is_none() => task.submit_time = Some(now),
        TaskState::Running if task.start_time.is_none() => task.start_time = Some(now),
        s if s.is_terminal() => task.completion_time = Some(now),
        _ => {}
    }
    task.state = to;
    Ok(task)
}

/// Queue ordering: larger priority first, then earlier submit time, then
/// lexicographic task id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueKey<'a> {
    pub priority: i64,
    pub submit_time: VirtualTime,
    pub task_id: &'a TaskId,
}

impl Eq for QueueKey<'_> {}

impl PartialOrd for QueueKey<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QueueKey<'_> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .priority
            .cmp(&self.priority)
            .then(self.submit_time.total_cmp(&other.submit_time))
            .then_with(|| self.task_id.cmp(other.task_id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum JobState {
    Planned,
    Active,
    Completed,
    Failed,
    Killed,
}

/// Derive a job's overall state from its task states.
pub fn overall_state<'a>(states: impl IntoIterator<Item = &'a TaskState>) -> JobState {
    let states: Vec<TaskState> = states.into_iter().copied().collect();
    if states.is_empty() {
        return JobState::Planned;
    }
    let any = |s: TaskState| states.contains(&s);
    if states.iter().all(|s| *s == TaskState::Completed) {
        JobState::Completed
    } else if any(TaskState::Failed) && !any(TaskState::Running) {
        JobState::Failed
    } else if states.iter().all(|s| s.is_terminal()) {
        JobState::Killed
    } else if states.iter().all(|s| *s == TaskState::Planned) {
        JobState::Planned
    } else {
        JobState::Active
    }
}

/// A job: tasks plus precedence edges `(before, after)` forming a DAG.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Job {
    pub job_id: JobId,
    pub owner: String,
    pub tasks: Vec<Task>,
    #[serde(default)]
    pub edges: Vec<(TaskId, TaskId)>,
}

impl Serialize for Job {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct View<'a> {
            job_id: &'a JobId,
            owner: &'a str,
            tasks: &'a [Task],
            edges: &'a [(TaskId, TaskId)],
            overall_state: JobState,
        }
        View {
            job_id: &self.job_id,
            owner: &self.owner,
            tasks: &self.tasks,
            edges: &self.edges,
            overall_state: self.overall_state(),
        }
        .serialize(serializer)
    }
}

impl Job {
    pub fn overall_state(&self) -> JobState {
        overall_state(self.tasks.iter().map(|t| &t.state))
    }

    pub fn task(&self, id: &TaskId) -> Option<&Task> {
        self.tasks.iter().find(|t| &t.task_id == id)
    }

    pub fn predecessors(&self, id: &TaskId) -> impl Iterator<Item = &TaskId> {
        let id = id.clone();
        self.edges.iter().filter(move |(_, b)| *b == id).map(|(a, _)| a)
    }

    /// Checks ids, attributes and acyclicity; returns a topological order.
    pub fn validate(&self) -> Result<Vec<TaskId>, ModelError> {
        if self.tasks.is_empty() {
            return Err(ModelError::InvalidJob(format!("job {} has no tasks", self.job_id)));
        }
        let mut ids = BTreeSet::new();
        for t in &self.tasks {
            if !ids.insert(t.task_id.clone()) {
                return Err(ModelError::InvalidJob(format!("duplicate task id {}", t.task_id)));
            }
            if t.job_id != self.job_id {
                return Err(ModelError::InvalidJob(format!(
                    "task {} belongs to job {}",
                    t.task_id, t.job_id
                )));
            }
            t.attributes.validate()?;
        }
        let mut indegree: BTreeMap<&TaskId, usize> = ids.iter().map(|id| (id, 0)).collect();
        for (a, b) in &self.edges {
            if !ids.contains(a) || !ids.contains(b) {
                return Err(ModelError::InvalidJob(format!("edge {a} -> {b} names unknown task")));
            }
            *indegree.get_mut(b).expect("checked above") += 1;
        }
        // Kahn's algorithm, lexicographic among ready tasks.
        let mut ready: VecDeque<&TaskId> =
            indegree.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
        let mut order = Vec::with_capacity(ids.len());
        while let Some(id) = ready.pop_front() {
            order.push(id.clone());
            for (_, b) in self.edges.iter().filter(|(a, _)| a == id) {
                let d = indegree.get_mut(b).expect("checked above");
                *d -= 1;
                if *d == 0 {
                    ready.push_back(b);
                }
            }
        }
        if order.len() != ids.len() {
            return Err(ModelError::InvalidJob(format!("job {} has a cycle", self.job_id)));
        }
        Ok(order)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcretePlan {
    pub job_id: JobId,
    pub assignments: BTreeMap<TaskId, SiteId>,
    pub created_by: String,
    pub plan_time: VirtualTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimateKind {
    Runtime,
    Queue,
    Transfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    Mean,
    LinearRegression,
    ExactSum,
    BandwidthModel,
    None,
}

/// A predicted duration. `template_rank` is only meaningful for runtime
/// estimates and is 0 otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub kind: EstimateKind,
    pub value: f64,
    pub method: EstimateMethod,
    pub sample_count: u64,
    pub template_rank: u8,
}

impl Estimate {
    pub fn new(kind: EstimateKind, value: f64, method: EstimateMethod, sample_count: u64) -> Self {
        Self { kind, value: value.max(0.0), method, sample_count, template_rank: 0 }
    }

    pub fn runtime(value: f64, method: EstimateMethod, sample_count: u64, rank: u8) -> Self {
        Self { template_rank: rank, ..Self::new(EstimateKind::Runtime, value, method, sample_count) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateEvaluation {
    pub actual_runtime: f64,
    pub estimated_runtime: f64,
    pub percentage_error: f64,
}

impl EstimateEvaluation {
    pub fn new(actual_runtime: f64, estimated_runtime: f64) -> Result<Self, ModelError> {
        Ok(Self {
            actual_runtime,
            estimated_runtime,
            percentage_error: percentage_error(actual_runtime, estimated_runtime)?,
        })
    }
}

/// `(actual - estimated) / actual * 100`; negative for over-estimates.
pub fn percentage_error(actual: f64, estimated: f64) -> Result<f64, ModelError> {
    if !(actual > 0.0) {
        return Err(ModelError::ZeroActualRuntime);
    }
    Ok((actual - estimated) / actual * 100.0)
}

/// Mean of absolute percentage errors.
pub fn mean_absolute_percentage_error(evals: &[EstimateEvaluation]) -> Result<f64, ModelError> {
    if evals.is_empty() {
        return Err(ModelError::EmptyList);
    }
    Ok(evals.iter().map(|e| e.percentage_error.abs()).sum::<f64>() / evals.len() as f64)
}

/// Mean of signed percentage errors; over- and under-estimates cancel.
pub fn signed_mean_percentage_error(evals: &[EstimateEvaluation]) -> Result<f64, ModelError> {
    if evals.is_empty() {
        return Err(ModelError::EmptyList);
    }
    Ok(evals.iter().map(|e| e.percentage_error).sum::<f64>() / evals.len() as f64)
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_run_sets_start_time() {
        let t = transition(task("t"), TaskState::Queued, 0.0).unwrap();
        let t = transition(t, TaskState::Running, 10.0).unwrap();
        assert_eq!(t.start_time, Some(10.0));
        let t = transition(t, TaskState::Paused, 20.0).unwrap();
        let t = transition(t, TaskState::Running, 30.0).unwrap();
        assert_eq!(t.start_time, Some(10.0));
    }

    #[test]
    fn terminal_states_absorb() {
        let t = transition(task("t"), TaskState::Queued, 0.0).unwrap();
        let t = transition(t, TaskState::Running, 1.0).unwrap();
        let t = transition(t, TaskState::Completed, 2.0).unwrap();
        assert_eq!(t.completion_time, Some(2.0));
        let err = transition(t, TaskState::Running, 3.0).unwrap_err();
        assert_eq!(
            err,
            ModelError::IllegalTransition { from: TaskState::Completed, to: TaskState::Running }
        );
        assert!(err.to_string().contains("COMPLETED -> RUNNING"));
    }

    #[test]
    fn paused_task_does_not_accrue() {
        let mut t = transition(task("t"), TaskState::Queued, 0.0).unwrap();
        t = transition(t, TaskState::Running, 0.0).unwrap();
        t.accrue(5.0);
        t = transition(t, TaskState::Paused, 5.0).unwrap();
        t.accrue(100.0);
        assert_eq!(t.wall_clock_accumulated, 5.0);
        t = transition(t, TaskState::Running, 105.0).unwrap();
        assert_eq!(t.wall_clock_accumulated, 5.0);
    }

    #[test]
    fn kill_from_any_live_state() {
        for s in TaskState::ALL {
            assert_eq!(s.can_transition_to(TaskState::Killed), !s.is_terminal(), "{s}");
        }
        assert!(!TaskState::Planned.can_transition_to(TaskState::Moving));
        assert!(TaskState::Moving.can_transition_to(TaskState::Queued));
        assert!(!TaskState::Moving.can_transition_to(TaskState::Running));
    }

    #[test]
    fn percentage_error_examples() {
        assert_eq!(percentage_error(100.0, 90.0).unwrap(), 10.0);
        assert_eq!(percentage_error(100.0, 100.0).unwrap(), 0.0);
        let e = percentage_error(283.0, 369.0).unwrap();
        // (283 - 369) / 283 * 100 = -8600/283
        assert!((e - (-8600.0 / 283.0)).abs() < 1e-12);
        assert!((e - -30.39).abs() < 0.005);
        assert_eq!(percentage_error(0.0, 1.0), Err(ModelError::ZeroActualRuntime));
    }

    #[test]
    fn mape_examples() {
        let pair = [EstimateEvaluation::new(100.0, 90.0).unwrap(), EstimateEvaluation::new(100.0, 110.0).unwrap()];
        assert!((mean_absolute_percentage_error(&pair).unwrap() - 10.0).abs() < 1e-12);
        assert!(signed_mean_percentage_error(&pair).unwrap().abs() < 1e-12);

        let twenty: Vec<_> = (0..20)
            .map(|_| EstimateEvaluation { actual_runtime: 1.0, estimated_runtime: 0.8647, percentage_error: 13.53 })
            .collect();
        assert!((mean_absolute_percentage_error(&twenty).unwrap() - 13.53).abs() < 1e-9);

        let exact: Vec<_> = (1..5).map(|i| EstimateEvaluation::new(i as f64, i as f64).unwrap()).collect();
        assert_eq!(mean_absolute_percentage_error(&exact).unwrap(), 0.0);
        assert_eq!(mean_absolute_percentage_error(&[]), Err(ModelError::EmptyList));
    }

    #[test]
    fn queue_key_ordering() {
        let (a, b, c) = (TaskId::new("a"), TaskId::new("b"), TaskId::new("c"));
        let hi = QueueKey { priority: 9, submit_time: 5.0, task_id: &c };
        let lo = QueueKey { priority: 1, submit_time: 0.0, task_id: &a };
        let early = QueueKey { priority: 5, submit_time: 1.0, task_id: &b };
        let late = QueueKey { priority: 5, submit_time: 2.0, task_id: &a };
        let mut v = vec![lo, late, hi, early];
        v.sort();
        assert_eq!(v, vec![hi, early, late, lo]);
    }

    #[test]
    fn job_validation_and_state() {
        let mut job = Job {
            job_id: JobId::new("job"),
            owner: "alice".into(),
            tasks: vec![task("a"), task("b"), task("c")],
            edges: vec![(TaskId::new("a"), TaskId::new("b")), (TaskId::new("b"), TaskId::new("c"))],
        };
        assert_eq!(job.validate().unwrap(), vec![TaskId::new("a"), TaskId::new("b"), TaskId::new("c")]);
        assert_eq!(job.overall_state(), JobState::Planned);
        job.edges.push((TaskId::new("c"), TaskId::new("a")));
        assert!(matches!(job.validate(), Err(ModelError::InvalidJob(_))));

        let states = [TaskState::Completed, TaskState::Completed];
        assert_eq!(overall_state(&states), JobState::Completed);
        let states = [TaskState::Failed, TaskState::Running];
        assert_eq!(overall_state(&states), JobState::Active);
        let states = [TaskState::Failed, TaskState::Queued];
        assert_eq!(overall_state(&states), JobState::Failed);
        let states = [TaskState::Completed, TaskState::Killed];
        assert_eq!(overall_state(&states), JobState::Killed);
    }

    #[test]
    fn canonical_field_names() {
        let t = task("t");
        let v = serde_json::to_value(&t).unwrap();
        for key in [
            "task_id",
            "attributes",
            "state",
            "submit_time",
            "start_time",
            "completion_time",
            "wall_clock_accumulated",
            "assigned_site",
            "submitted_estimate",
            "checkpointable",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["state"], "PLANNED");
        assert_eq!(v["attributes"]["job_type"], "batch");
        let e = Estimate::runtime(1.0, EstimateMethod::LinearRegression, 3, 1);
        let v = serde_json::to_value(e).unwrap();
        assert_eq!(v["method"], "linear_regression");
        assert_eq!(v["kind"], "runtime");
    }

    fn any_state() -> impl Strategy<Value = TaskState> {
        proptest::sample::select(TaskState::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn wall_clock_never_decreases(steps in proptest::collection::vec((any_state(), 0.0f64..50.0), 1..60)) {
            let mut t = task("p");
            let mut now = 0.0;
            let mut last = 0.0;
            for (to, dt) in steps {
                now += dt;
                t.accrue(dt);
                prop_assert!(t.wall_clock_accumulated >= last);
                last = t.wall_clock_accumulated;
                let before = t.state;
                match transition(t.clone(), to, now) {
                    Ok(next) => {
                        prop_assert!(before.can_transition_to(to));
                        prop_assert_eq!(next.completion_time.is_some(), to.is_terminal());
                        prop_assert_eq!(next.wall_clock_accumulated, last);
                        t = next;
                    }
                    Err(_) => prop_assert!(!before.can_transition_to(to)),
                }
                if t.state != TaskState::Running {
                    let w = t.wall_clock_accumulated;
                    t.accrue(1.0);
                    prop_assert_eq!(t.wall_clock_accumulated, w);
                }
            }
        }

        #[test]
        fn overall_state_is_pure(states in proptest::collection::vec(any_state(), 0..12)) {
            let a = overall_state(&states);
            prop_assert_eq!(a, overall_state(&states));
            prop_assert_eq!(a == JobState::Completed, !states.is_empty() && states.iter().all(|s| *s == TaskState::Completed));
        }

        #[test]
        fn identity_error_is_zero(a in 1e-6f64..1e9) {
            prop_assert_eq!(percentage_error(a, a).unwrap(), 0.0);
        }
    }
}
