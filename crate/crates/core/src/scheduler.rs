//! Site selection. Each task goes to the alive site minimising
//! `runtime * (1 + load) + queue wait + input staging time`; ties go to the
//! cheaper site, then the smaller site id.

use std::cmp::Ordering;

use serde::Serialize;
use thiserror::Error;

use crate::estimators::{estimate_input_transfer, estimate_queue_time_hypothetical, estimate_runtime, EstimatorError, QueueProbe};
use crate::fabric::{Fabric, SiteSnapshot};
use crate::history::HistoryStore;
use crate::model::{ConcretePlan, Estimate, Job, ModelError, SiteId, TaskAttributes, TaskId, VirtualTime};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("no alive site to plan on")]
    NoAliveSites,
    #[error("estimation failed at site {site}: {reason}")]
    EstimationFailed { site: SiteId, reason: String },
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("{0}")]
    InvalidJob(#[from] ModelError),
}

/// Runtime prediction for a task at a given site. The default ignores the
/// site and asks the history-based estimator.
pub trait SiteEstimator: Send + Sync {
    fn runtime(&self, history: &HistoryStore, site: &SiteSnapshot, attributes: &TaskAttributes) -> Result<Estimate, EstimatorError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HistoryEstimator;

impl SiteEstimator for HistoryEstimator {
    fn runtime(&self, history: &HistoryStore, _site: &SiteSnapshot, attributes: &TaskAttributes) -> Result<Estimate, EstimatorError> {
        estimate_runtime(history, attributes)
    }
}

impl<F> SiteEstimator for F
where
    F: Fn(&HistoryStore, &SiteSnapshot, &TaskAttributes) -> Result<Estimate, EstimatorError> + Send + Sync,
{
    fn runtime(&self, history: &HistoryStore, site: &SiteSnapshot, attributes: &TaskAttributes) -> Result<Estimate, EstimatorError> {
        self(history, site, attributes)
    }
}

/// One row of a score table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiteScore {
    pub site_id: SiteId,
    pub runtime: f64,
    pub load_factor: f64,
    pub queue: f64,
    pub transfer: f64,
    pub cost_rate: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskScores {
    pub task_id: TaskId,
    pub chosen: SiteId,
    pub estimate: Estimate,
    pub scores: Vec<SiteScore>,
    pub excluded: Vec<(SiteId, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanReport {
    pub plan: ConcretePlan,
    pub tasks: Vec<TaskScores>,
}

/// Order two scored sites: lower score, then lower cost rate, then site id.
pub fn compare_scores(a: &SiteScore, b: &SiteScore) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then(a.cost_rate.total_cmp(&b.cost_rate))
        .then_with(|| a.site_id.cmp(&b.site_id))
}

pub struct Scheduler {
    estimator: Box<dyn SiteEstimator>,
}

impl Default for Scheduler {
    fn default() -> Self {
        Self::new(HistoryEstimator)
    }
}

impl std::fmt::Debug for Scheduler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scheduler").finish_non_exhaustive()
    }
}

struct Candidate<'a> {
    task_id: &'a TaskId,
    attributes: &'a TaskAttributes,
    submit_time: Option<VirtualTime>,
    /// Already-completed work that does not need to be redone.
    checkpoint: f64,
}

impl Scheduler {
    pub fn new(estimator: impl SiteEstimator + 'static) -> Self {
        Self { estimator: Box::new(estimator) }
    }

    fn score_task(
        &self,
        fabric: &Fabric,
        history: &HistoryStore,
        c: &Candidate<'_>,
        exclude: &[SiteId],
        now: VirtualTime,
    ) -> Result<TaskScores, SchedulerError> {
        let alive: Vec<SiteSnapshot> =
            fabric.sites().into_iter().filter(|s| s.alive && !exclude.contains(&s.site_id)).collect();
        if alive.is_empty() {
            return Err(SchedulerError::NoAliveSites);
        }
        let mut scores = Vec::new();
        let mut excluded = Vec::new();
        let mut estimates = Vec::new();
        for site in &alive {
            let fail = |e: EstimatorError| (site.site_id.clone(), e.to_string());
            let scored = (|| {
                let est = self.estimator.runtime(history, site, c.attributes).map_err(fail)?;
                let probe = QueueProbe { task_id: c.task_id.clone(), priority: c.attributes.priority, submit_time: c.submit_time.unwrap_or(now) };
                let queue = estimate_queue_time_hypothetical(fabric, history, &site.site_id, &probe).map_err(fail)?;
                let transfer = estimate_input_transfer(fabric, &c.attributes.input_files, &site.site_id).map_err(fail)?;
                let remaining = (est.value - c.checkpoint).max(0.0);
                let score = remaining * (1.0 + site.load_factor) + queue.value + transfer.value;
                Ok::<_, (SiteId, String)>((
                    est,
                    SiteScore {
                        site_id: site.site_id.clone(),
                        runtime: remaining,
                        load_factor: site.load_factor,
                        queue: queue.value,
                        transfer: transfer.value,
                        cost_rate: site.cost_rate,
                        score,
                    },
                ))
            })();
            match scored {
                Ok((est, s)) => {
                    estimates.push((s.site_id.clone(), est));
                    scores.push(s);
                }
                Err(x) => excluded.push(x),
            }
        }
        let Some(best) = scores.iter().min_by(|a, b| compare_scores(a, b)).cloned() else {
            let (site, reason) = excluded.pop().expect("every alive site was either scored or excluded");
            return Err(SchedulerError::EstimationFailed { site, reason });
        };
        let estimate = estimates.into_iter().find(|(s, _)| *s == best.site_id).expect("scored").1;
        Ok(TaskScores { task_id: c.task_id.clone(), chosen: best.site_id, estimate, scores, excluded })
    }

    /// Plan every task of `job`.
    pub fn plan(
        &self,
        fabric: &Fabric,
        history: &HistoryStore,
        job: &Job,
        created_by: &str,
        now: VirtualTime,
    ) -> Result<PlanReport, SchedulerError> {
        let order = job.validate()?;
        let mut plan = ConcretePlan {
            job_id: job.job_id.clone(),
            assignments: Default::default(),
            created_by: created_by.to_string(),
            plan_time: now,
        };
        let mut tasks = Vec::new();
        for id in order {
            let task = job.task(&id).expect("validated");
            let c = Candidate { task_id: &task.task_id, attributes: &task.attributes, submit_time: None, checkpoint: 0.0 };
            let scored = self.score_task(fabric, history, &c, &[], now)?;
            plan.assignments.insert(id, scored.chosen.clone());
            tasks.push(scored);
        }
        Ok(PlanReport { plan, tasks })
    }

    /// Choose a new site for a task already known to the fabric, skipping
    /// `exclude`, and record a fresh submitted estimate for it. Scoring
    /// counts only the work beyond `checkpoint`.
    pub fn resubmit(
        &self,
        fabric: &mut Fabric,
        history: &mut HistoryStore,
        task_id: &TaskId,
        exclude: &[SiteId],
        checkpoint: Option<f64>,
    ) -> Result<TaskScores, SchedulerError> {
        let view = fabric.task(task_id).ok_or_else(|| SchedulerError::UnknownTask(task_id.clone()))?;
        let now = fabric.now();
        let c = Candidate {
            task_id: &view.task.task_id,
            attributes: &view.task.attributes,
            submit_time: view.task.submit_time,
            checkpoint: checkpoint.unwrap_or(0.0),
        };
        let scored = self.score_task(fabric, history, &c, exclude, now)?;
        history
            .record_estimate(task_id.clone(), scored.estimate, now)
            .map_err(|e| SchedulerError::EstimationFailed { site: scored.chosen.clone(), reason: e.to_string() })?;
        fabric
            .set_submitted_estimate(task_id, scored.estimate)
            .map_err(|_| SchedulerError::UnknownTask(task_id.clone()))?;
        Ok(scored)
    }
}
