//! Stand-in quota and accounting service: per-site cost rates and a ledger
//! of debits for completed work.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::model::{SiteId, TaskId, VirtualTime};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Debit {
    pub at: VirtualTime,
    pub account: String,
    pub task_id: TaskId,
    pub site_id: SiteId,
    pub cpu_seconds: f64,
    pub amount: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Accounting {
    rates: BTreeMap<SiteId, f64>,
    ledger: Vec<Debit>,
}

impl Accounting {
    pub fn set_rate(&mut self, site: SiteId, rate: f64) {
        self.rates.insert(site, rate);
    }

    pub fn cost_rate(&self, site: &SiteId) -> Option<f64> {
        self.rates.get(site).copied()
    }

    /// Price of `cpu_seconds` at `site`.
    pub fn quote(&self, site: &SiteId, cpu_seconds: f64) -> Option<f64> {
        self.cost_rate(site).map(|r| r * cpu_seconds)
    }

    pub fn debit(&mut self, at: VirtualTime, account: &str, task_id: &TaskId, site_id: &SiteId, cpu_seconds: f64) -> f64 {
        let amount = self.quote(site_id, cpu_seconds).unwrap_or(0.0);
        self.ledger.push(Debit {
            at,
            account: account.to_string(),
            task_id: task_id.clone(),
            site_id: site_id.clone(),
            cpu_seconds,
            amount,
        });
        amount
    }

    pub fn ledger(&self) -> &[Debit] {
        &self.ledger
    }

    pub fn balance(&self, account: &str) -> f64 {
        self.ledger.iter().filter(|d| d.account == account).map(|d| d.amount).sum()
    }
}
