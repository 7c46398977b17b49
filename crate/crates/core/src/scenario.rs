//! Line-oriented scenario files.
//!
//! Each non-blank line is a record: a keyword, positional words, then
//! `key=value` tokens. `#` starts a comment. Sizes accept `B`, `KB`, `MB`,
//! `GB` and `TB` suffixes (powers of 1000).
//!
//! ```text
//! site A slots=1 cost=1.0 load=1.0 heartbeat=1
//! site B slots=2
//! link A B bandwidth=100MB
//! load A at=100 value=0.5
//! job j1 owner=alice
//! task t1 job=j1 user=alice queue=short cpu_hours=1 runtime=283 inputs=data:10MB@A output=5MB
//! edge j1 t1 t2
//! plan j1 t1=A
//! fault fail A at=50
//! fault recover A at=80
//! history file=trace.csv
//! record user=alice queue=short cpu_hours=1 runtime=283
//! policy objective=fast interval=10 threshold=1.5 enabled=true dual_run=false
//! user alice password=secret role=user
//! run until=1000
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use crate::fabric::{Fault, SimParams, SiteSpec};
use crate::history::{RecordStatus, TaskHistoryRecord};
use crate::model::{InputFile, Job, JobId, JobType, SiteId, Task, TaskAttributes, TaskId, VirtualTime};
use crate::steering::{Objective, OptimizerPolicy, Role};

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            f.write_str(&self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

impl std::error::Error for ScenarioError {}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTask {
    pub task: Task,
    pub params: SimParams,
    pub submit: VirtualTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioJob {
    pub job_id: JobId,
    pub owner: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scenario {
    pub sites: Vec<SiteSpec>,
    pub links: Vec<(SiteId, SiteId, f64)>,
    pub loads: Vec<(SiteId, VirtualTime, f64)>,
    pub faults: Vec<(SiteId, VirtualTime, Fault)>,
    pub jobs: Vec<ScenarioJob>,
    pub tasks: Vec<ScenarioTask>,
    pub edges: Vec<(JobId, TaskId, TaskId)>,
    pub plans: BTreeMap<JobId, BTreeMap<TaskId, SiteId>>,
    pub history_files: Vec<PathBuf>,
    pub history_records: Vec<TaskHistoryRecord>,
    pub policy: Option<OptimizerPolicy>,
    pub dual_run: bool,
    pub users: Vec<(String, String, Role)>,
    pub run_until: Option<VirtualTime>,
}

/// Parse a size such as `10MB`, `512`, `1.5GB`.
pub fn parse_bytes(raw: &str) -> Result<u64, String> {
    let s = raw.trim();
    let upper = s.to_ascii_uppercase();
    let (num, scale) = [("TB", 1e12), ("GB", 1e9), ("MB", 1e6), ("KB", 1e3), ("B", 1.0)]
        .iter()
        .find_map(|(suffix, scale)| upper.strip_suffix(suffix).map(|n| (n.to_string(), *scale)))
        .unwrap_or((upper.clone(), 1.0));
    let v: f64 = num.trim().parse().map_err(|_| format!("bad size `{raw}`"))?;
    if !(v >= 0.0) || !v.is_finite() {
        return Err(format!("bad size `{raw}`"));
    }
    Ok((v * scale).round() as u64)
}

struct Line<'a> {
    words: Vec<&'a str>,
    kv: BTreeMap<&'a str, &'a str>,
    used: HashSet<&'a str>,
}

impl<'a> Line<'a> {
    fn split(text: &'a str) -> Result<Self, String> {
        let mut words = Vec::new();
        let mut kv = BTreeMap::new();
        for tok in text.split_whitespace() {
            match tok.split_once('=') {
                Some((k, v)) => {
                    if kv.insert(k, v).is_some() {
                        return Err(format!("`{k}` given twice"));
                    }
                }
                None if kv.is_empty() => words.push(tok),
                None => return Err(format!("unexpected word `{tok}` after key=value fields")),
            }
        }
        Ok(Self { words, kv, used: HashSet::new() })
    }

    fn word(&self, i: usize, what: &str) -> Result<&'a str, String> {
        self.words.get(i).copied().ok_or_else(|| format!("missing {what}"))
    }

    fn opt(&mut self, key: &'a str) -> Option<&'a str> {
        self.used.insert(key);
        self.kv.get(key).copied()
    }

    fn req(&mut self, key: &'a str) -> Result<&'a str, String> {
        self.opt(key).ok_or_else(|| format!("missing `{key}=`"))
    }

    fn num<T: std::str::FromStr>(&mut self, key: &'a str) -> Result<Option<T>, String> {
        match self.opt(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| format!("bad value for `{key}`: `{v}`")),
        }
    }

    fn flag(&mut self, key: &'a str) -> Result<Option<bool>, String> {
        match self.opt(key) {
            None => Ok(None),
            Some("true" | "yes" | "1") => Ok(Some(true)),
            Some("false" | "no" | "0") => Ok(Some(false)),
            Some(v) => Err(format!("bad value for `{key}`: `{v}`")),
        }
    }

    fn finish(&self) -> Result<(), String> {
        match self.kv.keys().find(|k| !self.used.contains(*k)) {
            Some(k) => Err(format!("unknown field `{k}`")),
            None => Ok(()),
        }
    }
}

fn parse_inputs(raw: &str) -> Result<Vec<InputFile>, String> {
    raw.split(',')
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (name, rest) = item.split_once(':').ok_or_else(|| format!("input `{item}` needs name:size"))?;
            let (size, home) = match rest.split_once('@') {
                Some((s, h)) => (s, Some(SiteId::new(h))),
                None => (rest, None),
            };
            Ok(InputFile { name: name.to_string(), size_bytes: parse_bytes(size)?, home_site: home })
        })
        .collect()
}

fn parse_env(raw: &str) -> Result<BTreeMap<String, String>, String> {
    raw.split(',')
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (k, v) = item.split_once(':').ok_or_else(|| format!("env `{item}` needs KEY:VALUE"))?;
            Ok((k.to_string(), v.to_string()))
        })
        .collect()
}

fn attributes(l: &mut Line<'_>) -> Result<TaskAttributes, String> {
    Ok(TaskAttributes {
        user: l.req("user")?.to_string(),
        account: l.opt("account").unwrap_or("default").to_string(),
        queue_name: l.opt("queue").unwrap_or("default").to_string(),
        partition: l.opt("partition").unwrap_or("default").to_string(),
        job_type: l.opt("type").unwrap_or("batch").parse::<JobType>()?,
        nodes: l.num("nodes")?.unwrap_or(1),
        requested_cpu_hours: l.num("cpu_hours")?.unwrap_or(1.0),
        input_files: match l.opt("inputs") {
            Some(raw) => parse_inputs(raw)?,
            None => Vec::new(),
        },
        priority: l.num("priority")?.unwrap_or(0),
    })
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError { line: 0, message: format!("cannot read {}: {e}", path.display()) })?;
        Self::parse(&text, path.parent())
    }

    /// Parse scenario text; relative history file paths resolve against
    /// `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self, ScenarioError> {
        let mut sc = Scenario::default();
        for (i, raw) in text.lines().enumerate() {
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            sc.parse_line(content, base).map_err(|message| ScenarioError { line: i + 1, message })?;
        }
        sc.check().map_err(|message| ScenarioError { line: 0, message })?;
        Ok(sc)
    }

    fn parse_line(&mut self, content: &str, base: Option<&Path>) -> Result<(), String> {
        let mut l = Line::split(content)?;
        let keyword = l.word(0, "record type")?;
        match keyword {
            "site" => {
                let id = l.word(1, "site id")?;
                let mut spec = SiteSpec::new(id, l.num("slots")?.unwrap_or(1));
                spec.load_factor = l.num("load")?.unwrap_or(0.0);
                spec.cost_rate = l.num("cost")?.unwrap_or(1.0);
                spec.heartbeat_interval = l.num("heartbeat")?.unwrap_or(1.0);
                self.sites.push(spec);
            }
            "link" => {
                let a = SiteId::new(l.word(1, "first site")?);
                let b = SiteId::new(l.word(2, "second site")?);
                let bw = parse_bytes(l.req("bandwidth")?)? as f64;
                self.links.push((a, b, bw));
            }
            "load" => {
                let site = SiteId::new(l.word(1, "site id")?);
                let at = l.num("at")?.ok_or("missing `at=`")?;
                let value = l.num("value")?.ok_or("missing `value=`")?;
                self.loads.push((site, at, value));
            }
            "fault" => {
                let fault = match l.word(1, "fault kind")? {
                    "fail" => Fault::Fail,
                    "recover" => Fault::Recover,
                    other => return Err(format!("unknown fault kind `{other}`")),
                };
                let site = SiteId::new(l.word(2, "site id")?);
                let at = l.num("at")?.ok_or("missing `at=`")?;
                self.faults.push((site, at, fault));
            }
            "job" => {
                let job_id = JobId::new(l.word(1, "job id")?);
                let owner = l.opt("owner").map(str::to_string);
                self.jobs.push(ScenarioJob { job_id, owner });
            }
            "task" => {
                let id = TaskId::new(l.word(1, "task id")?);
                let job = JobId::new(l.opt("job").unwrap_or(id.as_str()));
                let attributes = attributes(&mut l)?;
                let mut task = Task::new(id, job, attributes);
                task.checkpointable = l.flag("checkpointable")?.unwrap_or(false);
                if let Some(raw) = l.opt("env") {
                    task.environment = parse_env(raw)?;
                }
                let runtime: f64 = l.num("runtime")?.ok_or("missing `runtime=`")?;
                let params = SimParams {
                    true_runtime: runtime,
                    fails_at: l.num("fails_at")?,
                    output_bytes: match l.opt("output") {
                        Some(raw) => parse_bytes(raw)?,
                        None => 0,
                    },
                };
                let submit = l.num("submit")?.unwrap_or(0.0);
                task.attributes.validate().map_err(|e| e.to_string())?;
                self.tasks.push(ScenarioTask { task, params, submit });
            }
            "edge" => {
                let job = JobId::new(l.word(1, "job id")?);
                let before = TaskId::new(l.word(2, "first task")?);
                let after = TaskId::new(l.word(3, "second task")?);
                self.edges.push((job, before, after));
            }
            "plan" => {
                let job = JobId::new(l.word(1, "job id")?);
                let entry = self.plans.entry(job).or_default();
                let keys: Vec<&str> = l.kv.keys().copied().collect();
                for k in keys {
                    let site = l.req(k)?;
                    entry.insert(TaskId::new(k), SiteId::new(site));
                }
            }
            "history" => {
                let file = l.req("file")?;
                let p = Path::new(file);
                self.history_files.push(match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.to_path_buf(),
                });
            }
            "record" => {
                let attributes = attributes(&mut l)?;
                let runtime: f64 = l.num("runtime")?.ok_or("missing `runtime=`")?;
                let start: f64 = l.num("start")?.unwrap_or(0.0);
                let submit: f64 = l.num("submit")?.unwrap_or(start);
                let status = match l.opt("status").unwrap_or("successful") {
                    "successful" => RecordStatus::Successful,
                    "failed" => RecordStatus::Failed,
                    other => return Err(format!("bad status `{other}`")),
                };
                let rec = TaskHistoryRecord {
                    attributes,
                    actual_runtime: runtime,
                    status,
                    submit_time: submit,
                    start_time: start,
                    completion_time: start + runtime,
                };
                rec.validate()?;
                self.history_records.push(rec);
            }
            "policy" => {
                let mut p = self.policy.unwrap_or_default();
                if let Some(o) = l.opt("objective") {
                    p.objective = match o {
                        "fast" => Objective::Fast,
                        "cheap" => Objective::Cheap,
                        other => return Err(format!("unknown objective `{other}`")),
                    };
                }
                if let Some(v) = l.num("interval")? {
                    p.check_interval = v;
                }
                if let Some(v) = l.num("threshold")? {
                    p.slowdown_threshold = v;
                }
                if let Some(v) = l.flag("enabled")? {
                    p.enabled = v;
                }
                if let Some(v) = l.flag("dual_run")? {
                    self.dual_run = v;
                }
                p.validate().map_err(|e| e.to_string())?;
                self.policy = Some(p);
            }
            "user" => {
                let user = l.word(1, "user name")?.to_string();
                let password = l.req("password")?.to_string();
                let role = l.opt("role").unwrap_or("user").parse()?;
                self.users.push((user, password, role));
            }
            "run" => {
                self.run_until = Some(l.num("until")?.ok_or("missing `until=`")?);
            }
            other => return Err(format!("unknown record type `{other}`")),
        }
        l.finish()
    }

    fn check(&self) -> Result<(), String> {
        let sites: HashSet<&SiteId> = self.sites.iter().map(|s| &s.site_id).collect();
        if sites.len() != self.sites.len() {
            return Err("duplicate site id".into());
        }
        let mut ids = HashSet::new();
        for t in &self.tasks {
            if !ids.insert(&t.task.task_id) {
                return Err(format!("duplicate task id {}", t.task.task_id));
            }
        }
        for (job, plan) in &self.plans {
            for (task, site) in plan {
                if !sites.contains(site) {
                    return Err(format!("plan for {job} names unknown site {site}"));
                }
                if !ids.contains(task) {
                    return Err(format!("plan for {job} names unknown task {task}"));
                }
            }
        }
        for job in self.job_list() {
            job.validate().map_err(|e| format!("job {}: {e}", job.job_id))?;
        }
        Ok(())
    }

    /// Tasks grouped into jobs, ordered by job id. A job's owner defaults to
    /// the user of its first task.
    pub fn job_list(&self) -> Vec<Job> {
        let mut jobs: BTreeMap<JobId, Job> = BTreeMap::new();
        for t in &self.tasks {
            let job = jobs.entry(t.task.job_id.clone()).or_insert_with(|| Job {
                job_id: t.task.job_id.clone(),
                owner: t.task.attributes.user.clone(),
                tasks: Vec::new(),
                edges: Vec::new(),
            });
            job.tasks.push(t.task.clone());
        }
        for j in &self.jobs {
            if let (Some(job), Some(owner)) = (jobs.get_mut(&j.job_id), j.owner.as_ref()) {
                job.owner = owner.clone();
            }
        }
        for (job, a, b) in &self.edges {
            if let Some(j) = jobs.get_mut(job) {
                j.edges.push((a.clone(), b.clone()));
            }
        }
        jobs.into_values().collect()
    }

    /// Submission time of a job: the earliest `submit` among its tasks.
    pub fn job_submit_time(&self, job: &JobId) -> VirtualTime {
        self.tasks
            .iter()
            .filter(|t| t.task.job_id == *job)
            .map(|t| t.submit)
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# two sites
site A slots=1 load=1.0 cost=2
site B slots=2
link A B bandwidth=100MB
task t1 job=j1 user=alice queue=short runtime=283 inputs=data:10MB@A output=5MB checkpointable=true
task t2 job=j1 user=alice runtime=10 submit=5
edge j1 t1 t2
plan j1 t1=A t2=B
fault fail A at=50
policy objective=cheap interval=5
user alice password=pw
run until=600
";

    #[test]
    fn sample_parses() {
        let sc = Scenario::parse(SAMPLE, None).unwrap();
        assert_eq!(sc.sites.len(), 2);
        assert_eq!(sc.links, vec![(SiteId::new("A"), SiteId::new("B"), 1e8)]);
        let t1 = &sc.tasks[0];
        assert_eq!(t1.task.attributes.input_files[0].size_bytes, 10_000_000);
        assert_eq!(t1.task.attributes.input_files[0].home_site, Some(SiteId::new("A")));
        assert_eq!(t1.params.output_bytes, 5_000_000);
        assert!(t1.task.checkpointable);
        let jobs = sc.job_list();
        assert_eq!(jobs.len(), 1);
        assert_eq!(jobs[0].edges.len(), 1);
        assert_eq!(sc.job_submit_time(&JobId::new("j1")), 0.0);
        assert_eq!(sc.policy.unwrap().objective, Objective::Cheap);
        assert_eq!(sc.run_until, Some(600.0));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = Scenario::parse("site A\ntask t1 user=a\n", None).unwrap_err();
        assert_eq!(err.line, 2);
        assert!(err.message.contains("runtime"));
        let err = Scenario::parse("site A slotz=2\n", None).unwrap_err();
        assert_eq!(err.line, 1);
        let err = Scenario::parse("bogus\n", None).unwrap_err();
        assert_eq!(err.to_string(), "line 1: unknown record type `bogus`");
    }

    #[test]
    fn sizes() {
        assert_eq!(parse_bytes("10MB").unwrap(), 10_000_000);
        assert_eq!(parse_bytes("1.5kb").unwrap(), 1500);
        assert_eq!(parse_bytes("42").unwrap(), 42);
        assert!(parse_bytes("-1MB").is_err());
    }

    #[test]
    fn cyclic_job_rejected() {
        let text = "site A\ntask a job=j user=u runtime=1\ntask b job=j user=u runtime=1\nedge j a b\nedge j b a\n";
        assert!(Scenario::parse(text, None).is_err());
    }
}
