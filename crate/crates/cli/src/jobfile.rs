//! Job files: JSON job submissions, or scenario-format task lines.

use std::path::Path;

use gridhelm_core::grid::{scenario_submissions, JobSubmission};
use gridhelm_core::scenario::Scenario;

/// Where a job file went wrong. `line` is 1-based; 0 when unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseFailure {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.line == 0 {
            f.write_str(&self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

/// Jobs in `text`. Text whose first non-blank character is `{` or `[` is
/// JSON (one submission or a list); anything else is read as a scenario.
pub fn parse_jobs(text: &str, base: Option<&Path>) -> Result<Vec<JobSubmission>, ParseFailure> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') || trimmed.starts_with('[') {
        let json_err = |e: serde_json::Error| ParseFailure { line: e.line(), message: e.to_string() };
        return if trimmed.starts_with('[') {
            serde_json::from_str::<Vec<JobSubmission>>(text).map_err(json_err)
        } else {
            serde_json::from_str::<JobSubmission>(text).map(|j| vec![j]).map_err(json_err)
        };
    }
    let sc = Scenario::parse(text, base).map_err(|e| ParseFailure { line: e.line, message: e.message })?;
    let jobs: Vec<JobSubmission> = scenario_submissions(&sc).into_iter().map(|(_, j)| j).collect();
    if jobs.is_empty() {
        return Err(ParseFailure { line: 0, message: "no jobs in file".into() });
    }
    Ok(jobs)
}

/// Comma-separated integers and `a..b` ranges (end exclusive).
pub fn parse_list(s: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|_| format!("bad range start in `{part}`"))?;
            let b: u64 = b.trim().parse().map_err(|_| format!("bad range end in `{part}`"))?;
            if b <= a {
                return Err(format!("empty range `{part}`"));
            }
            out.extend(a..b);
        } else {
            out.push(part.parse().map_err(|_| format!("`{part}` is not a non-negative integer"))?);
        }
    }
    if out.is_empty() {
        return Err("empty list".into());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_and_ranges() {
        assert_eq!(parse_list("1,5,10,25,50").unwrap(), vec![1, 5, 10, 25, 50]);
        assert_eq!(parse_list("0..3, 7").unwrap(), vec![0, 1, 2, 7]);
        assert!(parse_list("3..3").is_err());
        assert!(parse_list("x").is_err());
        assert!(parse_list("").is_err());
    }

    #[test]
    fn scenario_job_file() {
        let text = "task t1 job=j1 user=u queue=q runtime=10\ntask t2 job=j1 user=u queue=q runtime=5\nedge j1 t1 t2\n";
        let jobs = parse_jobs(text, None).unwrap();
        assert_eq!(jobs.len(), 1);
        assert_eq!(jobs[0].tasks.len(), 2);
        assert_eq!(jobs[0].edges.len(), 1);
    }

    #[test]
    fn json_job_file() {
        let text = r#"{"job_id":"j","tasks":[{"task_id":"a","user":"u","runtime":3.0}]}"#;
        let jobs = parse_jobs(text, None).unwrap();
        assert_eq!(jobs[0].tasks[0].runtime, 3.0);
        let list = format!("[{text},{}]", text.replace("\"j\"", "\"k\""));
        assert_eq!(parse_jobs(&list, None).unwrap().len(), 2);
    }

    #[test]
    fn errors_name_the_line() {
        let bad = "task t1 job=j1 user=u queue=q runtime=10\nfrobnicate\n";
        assert_eq!(parse_jobs(bad, None).unwrap_err().line, 2);
        let json = "{\n \"job_id\": \"j\",\n \"tasks\": [,]\n}";
        assert_eq!(parse_jobs(json, None).unwrap_err().line, 3);
    }
}
