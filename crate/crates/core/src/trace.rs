//! Seeded synthetic workload traces.
//!
//! Each trace draws from a fixed set of task templates. A template's
//! runtime is `base * requested_cpu_hours * noise`, where the base depends
//! only on the template's user, queue, job type and node count, and the
//! noise is log-normal with median 1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use crate::history::{RecordStatus, TaskHistoryRecord};
use crate::model::{JobType, TaskAttributes};

/// One family of similar tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTemplate {
    pub user: &'static str,
    pub account: &'static str,
    pub queue: &'static str,
    pub partition: &'static str,
    pub job_type: JobType,
    pub nodes: u32,
    /// Seconds of runtime per requested CPU hour.
    pub base: f64,
    /// Typical requested CPU hours.
    pub typical_cpu_hours: f64,
}

pub fn templates() -> Vec<TraceTemplate> {
    let t = |user, account, queue, partition, job_type, nodes, base, typical_cpu_hours| TraceTemplate {
        user,
        account,
        queue,
        partition,
        job_type,
        nodes,
        base,
        typical_cpu_hours,
    };
    vec![
        t("alice", "phys", "short", "main", JobType::Batch, 1, 900.0, 0.5),
        t("alice", "phys", "long", "main", JobType::Batch, 4, 1400.0, 4.0),
        t("bob", "chem", "short", "main", JobType::Interactive, 1, 600.0, 0.25),
        t("carol", "bio", "long", "big", JobType::Batch, 8, 1800.0, 8.0),
        t("dave", "chem", "medium", "main", JobType::Batch, 2, 1100.0, 2.0),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceConfig {
    pub seed: u64,
    /// Standard deviation of the log of the runtime noise; 0 for none.
    pub sigma: f64,
    pub history_rows: usize,
    pub test_rows: usize,
}

impl TraceConfig {
    pub fn new(seed: u64, sigma: f64) -> Self {
        Self { seed, sigma, history_rows: 100, test_rows: 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTrace {
    pub history: Vec<TaskHistoryRecord>,
    pub test: Vec<TaskHistoryRecord>,
}

/// History rows cycle through the templates so every template has a
/// share of them; test rows pick templates at random.
pub fn generate(config: TraceConfig) -> SyntheticTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = (config.sigma > 0.0).then(|| LogNormal::new(0.0, config.sigma).expect("sigma is finite"));
    let templates = templates();
    let mut clock = 0.0;
    let mut row = |rng: &mut ChaCha8Rng, t: &TraceTemplate| {
        let spread: f64 = rng.random_range(-0.4..0.4);
        let cpu_hours = (t.typical_cpu_hours * spread.exp() * 1000.0).round() / 1000.0;
        let factor = noise.map_or(1.0, |n| n.sample(rng));
        let runtime = t.base * cpu_hours * factor;
        let submit = clock;
        let start = submit + rng.random_range(0..300) as f64;
        let complete = start + runtime;
        clock += 600.0;
        TaskHistoryRecord {
            attributes: TaskAttributes {
                user: t.user.into(),
                account: t.account.into(),
                queue_name: t.queue.into(),
                partition: t.partition.into(),
                job_type: t.job_type,
                nodes: t.nodes,
                requested_cpu_hours: cpu_hours,
                input_files: Vec::new(),
                priority: 0,
            },
            actual_runtime: complete - start,
            status: RecordStatus::Successful,
            submit_time: submit,
            start_time: start,
            completion_time: complete,
        }
    };
    let history = (0..config.history_rows).map(|i| row(&mut rng, &templates[i % templates.len()])).collect();
    let test = (0..config.test_rows)
        .map(|_| {
            let k = rng.random_range(0..templates.len());
            row(&mut rng, &templates[k])
        })
        .collect();
    SyntheticTrace { history, test }
}
