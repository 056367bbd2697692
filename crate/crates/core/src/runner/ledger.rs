//! Append-only record of every protocol phase, stored as JSON lines.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::evolution::ChoiceMatrix;
use crate::plasticity::PruneRecord;
use crate::topology::Census;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Grow,
    Evolve,
    Train,
    Prune,
    FineTune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Grow => "grow",
            Phase::Evolve => "evolve",
            Phase::Train => "train",
            Phase::Prune => "prune",
            Phase::FineTune => "fine_tune",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneOutcome {
    pub task: usize,
    pub epochs: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub index: usize,
    pub phase: Phase,
    /// Task under growth/evolution/training, or the task whose completion
    /// triggered a pruning round.
    pub task: usize,
    /// Test metric of every learned task after the phase.
    pub metrics: BTreeMap<usize, f64>,
    pub census: Census,
    /// Share of finalized long-range choices that are "no connection".
    pub long_range_sparsity: f64,
    /// CRC32 of each finalized choice matrix, by task.
    pub choice_digests: BTreeMap<usize, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<ChoiceMatrix>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pruning: Vec<PruneRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fine_tune: Option<FineTuneOutcome>,
}

impl PhaseRecord {
    /// Mean metric over learned tasks (0 when none).
    pub fn average(&self) -> f64 {
        if self.metrics.is_empty() {
            0.0
        } else {
            self.metrics.values().sum::<f64>() / self.metrics.len() as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLedger {
    pub records: Vec<PhaseRecord>,
    path: Option<PathBuf>,
}

pub const LEDGER_FILE: &str = "ledger.jsonl";

impl MetricsLedger {
    pub fn in_memory() -> Self {
        MetricsLedger::default()
    }

    /// Ledger mirrored to `path`, which is created or truncated.
    pub fn create(path: &Path) -> Result<Self> {
        std::fs::write(path, b"").map_err(|e| Error::io(path, e))?;
        Ok(MetricsLedger {
            records: Vec::new(),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(format!("no ledger at {}", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        let mut offset = 0u64;
        for line in text.lines() {
            if !line.trim().is_empty() {
                let rec: PhaseRecord = serde_json::from_str(line).map_err(|e| Error::Corrupt {
                    path: path.to_path_buf(),
                    offset,
                    msg: format!("bad ledger record: {e}"),
                })?;
                records.push(rec);
            }
            offset += line.len() as u64 + 1;
        }
        Ok(MetricsLedger {
            records,
            path: Some(path.to_path_buf()),
        })
    }

    /// Drops records past `len` (on disk as well).
    pub fn truncate(&mut self, len: usize) -> Result<()> {
        self.records.truncate(len);
        self.rewrite()
    }

    /// Re-targets the ledger at `path` and writes all records there.
    pub fn attach(&mut self, path: &Path) -> Result<()> {
        self.path = Some(path.to_path_buf());
        self.rewrite()
    }

    fn rewrite(&self) -> Result<()> {
        if let Some(p) = &self.path {
            let mut text = String::new();
            for r in &self.records {
                text.push_str(&serde_json::to_string(r).expect("record serializes"));
                text.push('\n');
            }
            std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }

    pub fn push(&mut self, mut record: PhaseRecord) -> Result<&PhaseRecord> {
        record.index = self.records.len();
        if let Some(p) = &self.path {
            let mut f = std::fs::OpenOptions::new().append(true).create(true).open(p).map_err(|e| Error::io(p, e))?;
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn phases(&self) -> Vec<(Phase, usize)> {
        self.records.iter().map(|r| (r.phase, r.task)).collect()
    }

    /// Metric of `task` right after its own training phase.
    pub fn post_training_metric(&self, task: usize) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.phase == Phase::Train && r.task == task)
            .and_then(|r| r.metrics.get(&task).copied())
    }

    pub fn last(&self) -> Option<&PhaseRecord> {
        self.records.last()
    }
}
