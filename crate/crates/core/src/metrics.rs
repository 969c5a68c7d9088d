//! JSON-lines event log shared by the server and the launcher. Every figure
//! the `report` subcommand produces is recomputed from these records.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Milliseconds since the Unix epoch; the common clock of all processes.
pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricRecord {
    /// One propagation phase, from the first assignment of the cycle to the
    /// last accepted background state.
    Propagation {
        cycle: u32,
        wall_ms: f64,
        /// Keyed by runner id (as a string, JSON object keys).
        busy_ms: BTreeMap<String, f64>,
        members_propagated: usize,
        runners: usize,
        t_ms: u64,
    },
    Update {
        cycle: u32,
        members: usize,
        observations: usize,
        wall_ms: f64,
        t_ms: u64,
    },
    Member {
        cycle: u32,
        member: u32,
        runner: u32,
        start_ms: u64,
        wall_ms: f64,
        t_ms: u64,
    },
    RunnerJoined {
        runner: u32,
        t_ms: u64,
    },
    RunnerFailed {
        cycle: u32,
        runner: u32,
        member: Option<u32>,
        reason: String,
        t_ms: u64,
    },
    RunnerRetired {
        runner: u32,
        t_ms: u64,
    },
    MemberDropped {
        cycle: u32,
        member: u32,
        restarts: u32,
        t_ms: u64,
    },
    MemberReplaced {
        cycle: u32,
        member: u32,
        restarts: u32,
        t_ms: u64,
    },
    Checkpoint {
        cycle: u32,
        wall_ms: f64,
        t_ms: u64,
    },
    Restore {
        cycle: u32,
        t_ms: u64,
    },
    StudyDone {
        cycles: u32,
        members: usize,
        ensemble_hash: String,
        t_ms: u64,
    },
    Launcher {
        event: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        runner: Option<u32>,
        #[serde(default, skip_serializing_if = "String::is_empty")]
        detail: String,
        t_ms: u64,
    },
}

impl MetricRecord {
    pub fn t_ms(&self) -> u64 {
        match self {
            MetricRecord::Propagation { t_ms, .. }
            | MetricRecord::Update { t_ms, .. }
            | MetricRecord::Member { t_ms, .. }
            | MetricRecord::RunnerJoined { t_ms, .. }
            | MetricRecord::RunnerFailed { t_ms, .. }
            | MetricRecord::RunnerRetired { t_ms, .. }
            | MetricRecord::MemberDropped { t_ms, .. }
            | MetricRecord::MemberReplaced { t_ms, .. }
            | MetricRecord::Checkpoint { t_ms, .. }
            | MetricRecord::Restore { t_ms, .. }
            | MetricRecord::StudyDone { t_ms, .. }
            | MetricRecord::Launcher { t_ms, .. } => *t_ms,
        }
    }

    pub fn launcher(event: &str, runner: Option<u32>, detail: impl Into<String>) -> Self {
        MetricRecord::Launcher {
            event: event.to_string(),
            runner,
            detail: detail.into(),
            t_ms: now_ms(),
        }
    }
}

/// Appends records to a file opened in append mode. Each record is written
/// with a single `write` so lines from several processes do not interleave.
pub struct MetricsWriter {
    file: Option<Mutex<File>>,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            file: Some(Mutex::new(file)),
        })
    }

    pub fn disabled() -> Self {
        Self { file: None }
    }

    pub fn record(&self, rec: &MetricRecord) {
        let Some(file) = &self.file else { return };
        let mut line = serde_json::to_vec(rec).expect("metric record serializes");
        line.push(b'\n');
        let mut f = file.lock().unwrap_or_else(|p| p.into_inner());
        if let Err(e) = f.write_all(&line) {
            log::warn!("dropping metrics record: {e}");
        }
    }
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Metrics {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read metrics {}: {e}", path.display())))?;
    parse_metrics(&text)
}
