//! Task history: accounting-trace ingest, similarity lookup, and the
//! submission-time estimate table.
//!
//! Store directory layout (when persistent):
//!
//! ```text
//! <dir>/history.log     one {"key", "record"} JSON object per line
//! <dir>/estimates.log   one SubmittedEstimateRecord JSON object per line
//! ```
//!
//! Both logs are append-only; the in-memory index is rebuilt on open and a
//! torn final line is ignored.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Estimate, JobType, TaskAttributes, TaskId, VirtualTime};

pub const TRACE_COLUMNS: [&str; 13] = [
    "account",
    "user",
    "partition",
    "nodes",
    "job_type",
    "status",
    "requested_cpu_hours",
    "queue",
    "cpu_charge_rate",
    "idle_charge_rate",
    "submit",
    "start",
    "complete",
];

#[derive(Debug, Error)]
pub enum HistoryError {
    #[error("unreadable source {source_name}: {reason}")]
    UnreadableSource { source_name: String, reason: String },
    #[error("store i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid template configuration: {0}")]
    InvalidTemplates(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordStatus {
    Successful,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHistoryRecord {
    pub attributes: TaskAttributes,
    pub actual_runtime: f64,
    pub status: RecordStatus,
    pub submit_time: f64,
    pub start_time: f64,
    pub completion_time: f64,
}

impl TaskHistoryRecord {
    pub fn validate(&self) -> Result<(), String> {
        self.attributes.validate().map_err(|e| e.to_string())?;
        if !(self.start_time >= self.submit_time) {
            return Err("start before submit".into());
        }
        if !(self.completion_time >= self.start_time) {
            return Err("completion before start".into());
        }
        if !(self.actual_runtime > 0.0) {
            return Err("runtime must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmittedEstimateRecord {
    pub task_id: TaskId,
    pub estimate: Estimate,
    pub recorded_at: VirtualTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateField {
    User,
    QueueName,
    JobType,
    Nodes,
    Account,
    Partition,
}

impl TemplateField {
    fn matches(self, a: &TaskAttributes, b: &TaskAttributes) -> bool {
        match self {
            TemplateField::User => a.user == b.user,
            TemplateField::QueueName => a.queue_name == b.queue_name,
            TemplateField::JobType => a.job_type == b.job_type,
            TemplateField::Nodes => a.nodes == b.nodes,
            TemplateField::Account => a.account == b.account,
            TemplateField::Partition => a.partition == b.partition,
        }
    }
}

/// Attribute subset used to match a query against history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityTemplate {
    pub rank: u8,
    pub matched_fields: Vec<TemplateField>,
}

impl SimilarityTemplate {
    pub fn matches(&self, query: &TaskAttributes, candidate: &TaskAttributes) -> bool {
        self.matched_fields.iter().all(|f| f.matches(query, candidate))
    }

    /// Ranks 0..=3, most to least specific.
    pub fn defaults() -> Vec<SimilarityTemplate> {
        use TemplateField::*;
        [vec![User, QueueName, JobType, Nodes], vec![User, QueueName], vec![QueueName], vec![]]
            .into_iter()
            .enumerate()
            .map(|(rank, matched_fields)| SimilarityTemplate { rank: rank as u8, matched_fields })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub loaded: usize,
    pub duplicates: usize,
    /// `(line number, reason)` for each rejected row.
    pub skipped: Vec<(usize, String)>,
}

#[derive(Serialize, Deserialize)]
struct HistoryLine {
    key: String,
    record: TaskHistoryRecord,
}

#[derive(Debug)]
pub struct HistoryStore {
    records: Vec<TaskHistoryRecord>,
    keys: HashSet<String>,
    estimates: BTreeMap<TaskId, SubmittedEstimateRecord>,
    templates: Vec<SimilarityTemplate>,
    dir: Option<PathBuf>,
    history_log: Option<File>,
    estimates_log: Option<File>,
}

impl Default for HistoryStore {
    fn default() -> Self {
        Self::in_memory()
    }
}

pub(crate) fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> std::io::Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // A torn write can only be the last line; anything unparsable is skipped.
        if let Ok(v) = serde_json::from_str(&line) {
            out.push(v);
        }
    }
    Ok(out)
}

/// Terminate a torn final line so later appends start on a fresh line.
pub(crate) fn repair_tail(path: &Path) -> std::io::Result<()> {
    let Ok(bytes) = std::fs::read(path) else { return Ok(()) };
    if bytes.last().is_some_and(|b| *b != b'\n') {
        OpenOptions::new().append(true).open(path)?.write_all(b"\n")?;
    }
    Ok(())
}

pub(crate) fn append_line(file: &mut File, value: &impl Serialize) -> std::io::Result<()> {
    let mut line = serde_json::to_string(value).expect("records serialize");
    line.push('\n');
    file.write_all(line.as_bytes())?;
    file.flush()
}

fn parse_num<T: std::str::FromStr>(field: &str, raw: &str) -> Result<T, String> {
    raw.trim().parse().map_err(|_| format!("bad {field} `{raw}`"))
}

impl HistoryStore {
    pub fn in_memory() -> Self {
        Self {
            records: Vec::new(),
            keys: HashSet::new(),
            estimates: BTreeMap::new(),
            templates: SimilarityTemplate::defaults(),
            dir: None,
            history_log: None,
            estimates_log: None,
        }
    }

    /// Open (or create) a persistent store, replaying both logs.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, HistoryError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let mut store = Self::in_memory();
        for line in read_lines::<HistoryLine>(&dir.join("history.log"))? {
            if store.keys.insert(line.key) {
                store.records.push(line.record);
            }
        }
        for rec in read_lines::<SubmittedEstimateRecord>(&dir.join("estimates.log"))? {
            store.estimates.insert(rec.task_id.clone(), rec);
        }
        let open = |name: &str| {
            repair_tail(&dir.join(name))?;
            OpenOptions::new().create(true).append(true).open(dir.join(name))
        };
        store.history_log = Some(open("history.log")?);
        store.estimates_log = Some(open("estimates.log")?);
        store.dir = Some(dir);
        Ok(store)
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn templates(&self) -> &[SimilarityTemplate] {
        &self.templates
    }

    /// Replace the template ladder. Each rank must match on a subset of
    /// the previous rank's fields so broader ranks return supersets.
    pub fn set_templates(&mut self, templates: Vec<SimilarityTemplate>) -> Result<(), HistoryError> {
        if templates.is_empty() {
            return Err(HistoryError::InvalidTemplates("at least one template required".into()));
        }
        for (i, pair) in templates.windows(2).enumerate() {
            if !pair[1].matched_fields.iter().all(|f| pair[0].matched_fields.contains(f)) {
                return Err(HistoryError::InvalidTemplates(format!(
                    "rank {} is not a generalization of rank {}",
                    i + 1,
                    i
                )));
            }
        }
        for (i, t) in templates.iter().enumerate() {
            if t.rank as usize != i {
                return Err(HistoryError::InvalidTemplates(format!("rank {} out of order", t.rank)));
            }
        }
        self.templates = templates;
        Ok(())
    }

    pub fn records(&self) -> &[TaskHistoryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn insert(&mut self, key: String, record: TaskHistoryRecord) -> Result<bool, HistoryError> {
        if self.keys.contains(&key) {
            return Ok(false);
        }
        if let Some(f) = self.history_log.as_mut() {
            append_line(f, &HistoryLine { key: key.clone(), record: record.clone() })?;
        }
        self.keys.insert(key);
        self.records.push(record);
        Ok(true)
    }

    /// Append one record; returns false when an identical record exists.
    pub fn add_record(&mut self, record: TaskHistoryRecord) -> Result<bool, HistoryError> {
        record.validate().map_err(|reason| HistoryError::UnreadableSource {
            source_name: "record".into(),
            reason,
        })?;
        let canonical = serde_json::to_string(&record).expect("records serialize");
        let key = format!("{}#0", hex::encode(Sha256::digest(canonical.as_bytes())));
        self.insert(key, record)
    }

    pub fn ingest_trace_path(&mut self, path: impl AsRef<Path>) -> Result<IngestReport, HistoryError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| HistoryError::UnreadableSource {
            source_name: path.display().to_string(),
            reason: e.to_string(),
        })?;
        self.ingest_trace(file, &path.display().to_string())
    }

    /// Load a trace CSV (header required). Malformed rows are reported in
    /// the result rather than failing the whole ingest; re-ingesting the
    /// same content adds nothing.
    pub fn ingest_trace<R: Read>(&mut self, source: R, source_name: &str) -> Result<IngestReport, HistoryError> {
        let unreadable = |reason: String| HistoryError::UnreadableSource { source_name: source_name.into(), reason };
        let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(source);
        let mut report = IngestReport::default();
        let headers = match reader.headers() {
            Ok(h) => h.clone(),
            Err(e) => return Err(unreadable(e.to_string())),
        };
        if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
            return Ok(report);
        }
        let mut index = HashMap::new();
        for col in TRACE_COLUMNS {
            let pos = headers
                .iter()
                .position(|h| h.eq_ignore_ascii_case(col))
                .ok_or_else(|| unreadable(format!("missing column `{col}`")))?;
            index.insert(col, pos);
        }
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (i, row) in reader.records().enumerate() {
            let line = i + 2;
            let row = match row {
                Ok(r) => r,
                Err(e) => {
                    report.skipped.push((line, e.to_string()));
                    continue;
                }
            };
            let get = |col: &str| -> &str { row.get(index[col]).unwrap_or("") };
            match parse_trace_row(get) {
                Ok(record) => {
                    let canonical = row.iter().collect::<Vec<_>>().join(",");
                    let digest = hex::encode(Sha256::digest(canonical.as_bytes()));
                    let n = seen.entry(digest.clone()).or_insert(0);
                    let key = format!("{digest}#{n}");
                    *n += 1;
                    if self.insert(key, record)? {
                        report.loaded += 1;
                    } else {
                        report.duplicates += 1;
                    }
                }
                Err(reason) => report.skipped.push((line, reason)),
            }
        }
        Ok(report)
    }

    /// Successful records matching the template at `rank`, most recently
    /// completed first.
    pub fn similar_tasks(&self, attributes: &TaskAttributes, rank: u8) -> Vec<&TaskHistoryRecord> {
        let Some(template) = self.templates.iter().find(|t| t.rank == rank) else {
            return Vec::new();
        };
        let mut out: Vec<&TaskHistoryRecord> = self
            .records
            .iter()
            .filter(|r| r.status == RecordStatus::Successful && template.matches(attributes, &r.attributes))
            .collect();
        out.sort_by(|a, b| b.completion_time.total_cmp(&a.completion_time));
        out
    }

    pub fn record_estimate(&mut self, task_id: TaskId, estimate: Estimate, recorded_at: VirtualTime) -> Result<(), HistoryError> {
        let rec = SubmittedEstimateRecord { task_id: task_id.clone(), estimate, recorded_at };
        if let Some(f) = self.estimates_log.as_mut() {
            append_line(f, &rec)?;
        }
        self.estimates.insert(task_id, rec);
        Ok(())
    }

    pub fn lookup_estimate(&self, task_id: &TaskId) -> Option<Estimate> {
        self.estimates.get(task_id).map(|r| r.estimate)
    }
}

/// Parse a trace without storing it: valid records in file order plus the
/// rejected rows.
pub fn parse_trace<R: Read>(source: R, source_name: &str) -> Result<(Vec<TaskHistoryRecord>, Vec<(usize, String)>), HistoryError> {
    // occurrence-numbered keys mean a single source never dedupes itself
    let mut scratch = HistoryStore::in_memory();
    let report = scratch.ingest_trace(source, source_name)?;
    Ok((scratch.records, report.skipped))
}

fn parse_trace_row<'r>(get: impl Fn(&str) -> &'r str) -> Result<TaskHistoryRecord, String> {
    let job_type: JobType = get("job_type").parse()?;
    let status = match get("status").to_ascii_lowercase().as_str() {
        "successful" | "success" | "ok" => RecordStatus::Successful,
        "failed" | "failure" => RecordStatus::Failed,
        other => return Err(format!("bad status `{other}`")),
    };
    let _: f64 = parse_num("cpu_charge_rate", get("cpu_charge_rate"))?;
    let _: f64 = parse_num("idle_charge_rate", get("idle_charge_rate"))?;
    let submit: f64 = parse_num("submit", get("submit"))?;
    let start: f64 = parse_num("start", get("start"))?;
    let complete: f64 = parse_num("complete", get("complete"))?;
    let attributes = TaskAttributes {
        user: get("user").to_string(),
        account: get("account").to_string(),
        queue_name: get("queue").to_string(),
        partition: get("partition").to_string(),
        job_type,
        nodes: parse_num("nodes", get("nodes"))?,
        requested_cpu_hours: parse_num("requested_cpu_hours", get("requested_cpu_hours"))?,
        input_files: Vec::new(),
        priority: 0,
    };
    let record = TaskHistoryRecord {
        attributes,
        actual_runtime: complete - start,
        status,
        submit_time: submit,
        start_time: start,
        completion_time: complete,
    };
    record.validate()?;
    Ok(record)
}

/// Render records in the trace CSV schema.
pub fn write_trace(records: &[TaskHistoryRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRACE_COLUMNS).expect("in-memory write");
    for r in records {
        let a = &r.attributes;
        w.write_record([
            a.account.clone(),
            a.user.clone(),
            a.partition.clone(),
            a.nodes.to_string(),
            a.job_type.to_string(),
            match r.status {
                RecordStatus::Successful => "successful".to_string(),
                RecordStatus::Failed => "failed".to_string(),
            },
            a.requested_cpu_hours.to_string(),
            a.queue_name.clone(),
            "1".to_string(),
            "0".to_string(),
            r.submit_time.to_string(),
            r.start_time.to_string(),
            r.completion_time.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}
