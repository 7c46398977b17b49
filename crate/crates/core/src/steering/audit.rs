//! Append-only record of every steering command and optimizer decision.

use std::fs::{File, OpenOptions};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Verb;
use crate::history::{append_line, read_lines};
use crate::model::{SiteId, VirtualTime};

/// One scored candidate as it appears in an audit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub site_id: SiteId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub time: VirtualTime,
    /// Session token, or `optimizer` / `recovery` for internal actions.
    pub session: String,
    pub verb: Verb,
    pub target: String,
    pub outcome: String,
    /// Destination actually used by a move.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site: Option<SiteId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<ScoreRow>>,
}

impl AuditRecord {
    pub fn succeeded(&self) -> bool {
        self.outcome == "ok"
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("audit records serialize")
    }
}

#[derive(Debug, Default)]
pub struct AuditLog {
    records: Vec<AuditRecord>,
    file: Option<File>,
}

impl AuditLog {
    /// An audit log that is also appended to `path` (truncated on open).
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(Self { records: Vec::new(), file: Some(file) })
    }

    pub fn push(&mut self, record: AuditRecord) {
        if let Some(f) = self.file.as_mut() {
            // the in-memory copy stays authoritative if the disk write fails
            let _ = append_line(f, &record);
        }
        self.records.push(record);
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    /// Line-delimited canonical form.
    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| r.to_line() + "\n").collect()
    }

    pub fn parse(text: &str) -> Result<Vec<AuditRecord>, String> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
            .collect()
    }

    pub fn read(path: &Path) -> std::io::Result<Vec<AuditRecord>> {
        read_lines(path)
    }
}
