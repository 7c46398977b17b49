//! Runtime, queue-wait and transfer-time estimators.
//!
//! All three are pure functions of their inputs: the history store, a site
//! snapshot, or the fabric's link table.

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::fabric::{Fabric, FabricError, SiteSnapshot};
use crate::history::{parse_trace, HistoryError, HistoryStore, RecordStatus, TaskHistoryRecord};
use crate::model::{
    mean_absolute_percentage_error, signed_mean_percentage_error, Estimate, EstimateEvaluation, EstimateKind,
    EstimateMethod, InputFile, ModelError, QueueKey, SiteId, TaskAttributes, TaskId, TaskState, VirtualTime,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("no similar successful task in history")]
    EmptyHistory,
    #[error("unknown site {0}")]
    UnknownSite(SiteId),
    #[error("site {0} is down")]
    SiteDown(SiteId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("no submitted estimate for task {0}")]
    MissingSubmittedEstimate(TaskId),
    #[error("no link from {from} to {to}")]
    NoLink { from: SiteId, to: SiteId },
    #[error("history: {0}")]
    History(String),
    #[error("{0}")]
    Model(#[from] ModelError),
}

impl From<HistoryError> for EstimatorError {
    fn from(e: HistoryError) -> Self {
        EstimatorError::History(e.to_string())
    }
}

impl From<FabricError> for EstimatorError {
    fn from(e: FabricError) -> Self {
        match e {
            FabricError::UnknownSite(s) => EstimatorError::UnknownSite(s),
            FabricError::SiteDown(s) => EstimatorError::SiteDown(s),
            FabricError::UnknownTask(t) => EstimatorError::UnknownTask(t),
            FabricError::NoLink { from, to } => EstimatorError::NoLink { from, to },
            other => EstimatorError::History(other.to_string()),
        }
    }
}

pub type EstimatorResult<T> = Result<T, EstimatorError>;

/// Ordinary least squares fit of `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
}

impl LinearFit {
    /// None when fewer than two points or all `x` are equal.
    pub fn fit(points: &[(f64, f64)]) -> Option<LinearFit> {
        if points.len() < 2 {
            return None;
        }
        let n = points.len() as f64;
        let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
        let my = points.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        if !(sxx > 0.0) {
            return None;
        }
        let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let slope = sxy / sxx;
        Some(LinearFit { intercept: my - slope * mx, slope })
    }

    pub fn predict(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

fn mean(points: &[(f64, f64)]) -> f64 {
    points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64
}

fn variance_x(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<f64>() / n
}

/// Leave-one-out mean absolute percentage error of a predictor built from
/// the remaining points.
fn loo_mape(points: &[(f64, f64)], predict: impl Fn(&[(f64, f64)], f64) -> f64) -> f64 {
    let mut rest = Vec::with_capacity(points.len().saturating_sub(1));
    let mut total = 0.0;
    for i in 0..points.len() {
        rest.clear();
        rest.extend(points.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| *p));
        let (x, y) = points[i];
        total += ((y - predict(&rest, x)) / y).abs() * 100.0;
    }
    total / points.len() as f64
}

fn mean_predictor(rest: &[(f64, f64)], _x: f64) -> f64 {
    mean(rest)
}

fn regression_predictor(rest: &[(f64, f64)], x: f64) -> f64 {
    match LinearFit::fit(rest) {
        Some(f) => f.predict(x),
        None => mean(rest),
    }
}

/// Details of the choice made for one runtime estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuntimeDetail {
    pub estimate: Estimate,
    pub mean: f64,
    pub regression: Option<f64>,
    pub loo_mean: Option<f64>,
    pub loo_regression: Option<f64>,
}

/// Predict a runtime from the narrowest template rank with any successful
/// sample. With three or more samples and spread in requested CPU hours a
/// regression on requested CPU hours competes with the sample mean, and
/// the one with the lower leave-one-out error is used (ties go to the mean).
pub fn estimate_runtime(history: &HistoryStore, attributes: &TaskAttributes) -> EstimatorResult<Estimate> {
    estimate_runtime_detail(history, attributes).map(|d| d.estimate)
}

pub fn estimate_runtime_detail(history: &HistoryStore, attributes: &TaskAttributes) -> EstimatorResult<RuntimeDetail> {
    let mut ranks: Vec<u8> = history.templates().iter().map(|t| t.rank).collect();
    ranks.sort_unstable();
    for rank in ranks {
        let samples = history.similar_tasks(attributes, rank);
        if samples.is_empty() {
            continue;
        }
        let mut points: Vec<(f64, f64)> =
            samples.iter().map(|r| (r.attributes.requested_cpu_hours, r.actual_runtime)).collect();
        // canonical order so the result does not depend on ingest order
        points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        return Ok(choose(&points, attributes.requested_cpu_hours, rank));
    }
    Err(EstimatorError::EmptyHistory)
}

fn choose(points: &[(f64, f64)], x: f64, rank: u8) -> RuntimeDetail {
    let n = points.len() as u64;
    let m = mean(points);
    let mean_only = |m: f64| RuntimeDetail {
        estimate: Estimate::runtime(m, EstimateMethod::Mean, n, rank),
        mean: m,
        regression: None,
        loo_mean: None,
        loo_regression: None,
    };
    if points.len() < 3 || !(variance_x(points) > 0.0) {
        return mean_only(m);
    }
    let Some(fit) = LinearFit::fit(points) else {
        return mean_only(m);
    };
    let reg = fit.predict(x);
    let loo_m = loo_mape(points, mean_predictor);
    let loo_r = loo_mape(points, regression_predictor);
    let (value, method) = if loo_r < loo_m { (reg, EstimateMethod::LinearRegression) } else { (m, EstimateMethod::Mean) };
    RuntimeDetail {
        estimate: Estimate::runtime(value, method, n, rank),
        mean: m,
        regression: Some(reg),
        loo_mean: Some(loo_m),
        loo_regression: Some(loo_r),
    }
}

/// Where a task would sit in a site queue.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueProbe {
    pub task_id: TaskId,
    pub priority: i64,
    pub submit_time: VirtualTime,
}

impl QueueProbe {
    fn key(&self) -> QueueKey<'_> {
        QueueKey { priority: self.priority, submit_time: self.submit_time, task_id: &self.task_id }
    }
}

/// Expected wait before `probe` starts at `site`: the remaining submitted
/// runtime estimates of everything ahead of it, divided over the site's
/// slots. Running tasks count only when every slot is busy.
pub fn queue_wait(
    site: &SiteSnapshot,
    probe: &QueueProbe,
    lookup: impl Fn(&TaskId) -> Option<Estimate>,
) -> EstimatorResult<Estimate> {
    if !site.alive {
        return Err(EstimatorError::SiteDown(site.site_id.clone()));
    }
    if site.running.iter().any(|v| v.task.task_id == probe.task_id) {
        return Ok(Estimate::new(EstimateKind::Queue, 0.0, EstimateMethod::ExactSum, 0));
    }
    let key = probe.key();
    let mut ahead: Vec<(&TaskId, f64)> = Vec::new();
    for v in &site.queue {
        if v.task.task_id != probe.task_id && v.task.queue_key() < key {
            ahead.push((&v.task.task_id, v.task.wall_clock_accumulated));
        }
    }
    for id in &site.resume_pending {
        if *id == probe.task_id {
            continue;
        }
        if let Some(v) = site.paused.iter().chain(site.queue.iter()).find(|v| v.task.task_id == *id) {
            ahead.push((&v.task.task_id, v.task.wall_clock_accumulated));
        }
    }
    if site.free_slots() == 0 {
        for v in &site.running {
            ahead.push((&v.task.task_id, v.task.wall_clock_accumulated));
        }
    }
    ahead.sort_by(|a, b| a.0.cmp(b.0));
    ahead.dedup_by(|a, b| a.0 == b.0);
    let mut total = 0.0;
    for (id, elapsed) in &ahead {
        let est = lookup(id).ok_or_else(|| EstimatorError::MissingSubmittedEstimate((*id).clone()))?;
        total += (est.value - elapsed).max(0.0);
    }
    let slots = site.cpu_slots.max(1) as f64;
    Ok(Estimate::new(EstimateKind::Queue, total / slots, EstimateMethod::ExactSum, ahead.len() as u64))
}

/// Queue-wait estimate for a task known to the fabric, resident at `site`
/// or not.
pub fn estimate_queue_time(
    fabric: &Fabric,
    history: &HistoryStore,
    site: &SiteId,
    task_id: &TaskId,
) -> EstimatorResult<Estimate> {
    let snapshot = fabric.site(site)?;
    let view = fabric.task(task_id).ok_or_else(|| EstimatorError::UnknownTask(task_id.clone()))?;
    let task = &view.task;
    if task.state.is_terminal() {
        return Ok(Estimate::new(EstimateKind::Queue, 0.0, EstimateMethod::ExactSum, 0));
    }
    let probe = QueueProbe {
        task_id: task.task_id.clone(),
        priority: task.attributes.priority,
        submit_time: task.submit_time.unwrap_or(fabric.now()),
    };
    if task.state == TaskState::Running && task.assigned_site.as_ref() == Some(site) {
        return Ok(Estimate::new(EstimateKind::Queue, 0.0, EstimateMethod::ExactSum, 0));
    }
    queue_wait(&snapshot, &probe, |id| history.lookup_estimate(id))
}

/// Queue-wait estimate for a task that does not exist yet.
pub fn estimate_queue_time_hypothetical(
    fabric: &Fabric,
    history: &HistoryStore,
    site: &SiteId,
    probe: &QueueProbe,
) -> EstimatorResult<Estimate> {
    let snapshot = fabric.site(site)?;
    queue_wait(&snapshot, probe, |id| history.lookup_estimate(id))
}

/// Time to move `bytes` from one site to another; zero between a site and
/// itself.
pub fn estimate_transfer_time(fabric: &Fabric, from: &SiteId, to: &SiteId, bytes: u64) -> EstimatorResult<Estimate> {
    fabric.site(from)?;
    fabric.site(to)?;
    if from == to {
        return Ok(Estimate::new(EstimateKind::Transfer, 0.0, EstimateMethod::BandwidthModel, 0));
    }
    let bw = fabric
        .bandwidth(from, to)
        .ok_or_else(|| EstimatorError::NoLink { from: from.clone(), to: to.clone() })?;
    Ok(transfer_over(bytes, bw))
}

/// Transfer estimate for `bytes` over a link of `bandwidth` bytes per second.
pub fn transfer_over(bytes: u64, bandwidth: f64) -> Estimate {
    Estimate::new(EstimateKind::Transfer, bytes as f64 / bandwidth, EstimateMethod::BandwidthModel, 1)
}

/// Time to stage each input file from its home site to `to`, files with no
/// home or already at `to` contributing nothing.
pub fn estimate_input_transfer(fabric: &Fabric, files: &[InputFile], to: &SiteId) -> EstimatorResult<Estimate> {
    let mut total = 0.0;
    let mut legs = 0;
    for f in files {
        let Some(home) = f.home_site.as_ref() else { continue };
        if home == to {
            continue;
        }
        let bw = fabric
            .bandwidth(home, to)
            .ok_or_else(|| EstimatorError::NoLink { from: home.clone(), to: to.clone() })?;
        total += f.size_bytes as f64 / bw;
        legs += 1;
    }
    Ok(Estimate::new(EstimateKind::Transfer, total, EstimateMethod::BandwidthModel, legs))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationCase {
    pub case: usize,
    pub attributes: TaskAttributes,
    pub estimate: Estimate,
    pub evaluation: EstimateEvaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub cases: Vec<EvaluationCase>,
    pub signed_mean_error: f64,
    pub mean_absolute_error: f64,
    pub skipped: Vec<(usize, String)>,
}

impl EvaluationReport {
    /// `case,actual,estimated,pct_error` rows.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["case", "actual", "estimated", "pct_error"]).expect("in-memory write");
        for c in &self.cases {
            w.write_record([
                c.case.to_string(),
                c.evaluation.actual_runtime.to_string(),
                c.evaluation.estimated_runtime.to_string(),
                c.evaluation.percentage_error.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

/// Estimate every successful test record against `history` and compare
/// with its actual runtime.
pub fn evaluate_records(history: &HistoryStore, test: &[TaskHistoryRecord]) -> EstimatorResult<EvaluationReport> {
    let mut cases = Vec::new();
    for rec in test.iter().filter(|r| r.status == RecordStatus::Successful) {
        let estimate = estimate_runtime(history, &rec.attributes)?;
        let evaluation = EstimateEvaluation::new(rec.actual_runtime, estimate.value)?;
        cases.push(EvaluationCase { case: cases.len() + 1, attributes: rec.attributes.clone(), estimate, evaluation });
    }
    let errors: Vec<EstimateEvaluation> = cases.iter().map(|c| c.evaluation).collect();
    Ok(EvaluationReport {
        signed_mean_error: signed_mean_percentage_error(&errors)?,
        mean_absolute_error: mean_absolute_percentage_error(&errors)?,
        cases,
        skipped: Vec::new(),
    })
}

/// [`evaluate_records`] over two trace files.
pub fn evaluate(history_path: &Path, test_path: &Path) -> EstimatorResult<EvaluationReport> {
    let mut history = HistoryStore::in_memory();
    history.ingest_trace_path(history_path)?;
    let file = std::fs::File::open(test_path).map_err(|e| HistoryError::UnreadableSource {
        source_name: test_path.display().to_string(),
        reason: e.to_string(),
    })?;
    let (test, skipped) = parse_trace(file, &test_path.display().to_string())?;
    let mut report = evaluate_records(&history, &test)?;
    report.skipped = skipped;
    Ok(report)
}
