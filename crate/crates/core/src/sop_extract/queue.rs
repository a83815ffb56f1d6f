//! Persisted queue of cases deferred to human experts.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::kb::SopRecord;
use crate::tickets::{append_jsonl, read_jsonl, TicketError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscalationKind {
    /// Drafts did not agree enough to be accepted.
    SopReview,
    /// Cause assignment was not confident.
    CauseAssignment,
    /// The ticket could not be labeled automatically.
    Labeling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalationRecord {
    pub kind: EscalationKind,
    pub ticket_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub drafts: Vec<SopRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability_score: Option<usize>,
    pub reason: String,
}

/// Append-only JSONL queue, safe to share between threads.
pub struct EscalationQueue {
    path: PathBuf,
    lock: Mutex<()>,
}

impl EscalationQueue {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into(), lock: Mutex::new(()) }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn push(&self, record: &EscalationRecord) -> Result<(), TicketError> {
        let _g = self.lock.lock().expect("queue lock poisoned");
        append_jsonl(&self.path, record)
    }

    pub fn records(&self) -> Result<Vec<EscalationRecord>, TicketError> {
        let _g = self.lock.lock().expect("queue lock poisoned");
        if !self.path.exists() {
            return Ok(Vec::new());
        }
        read_jsonl(&self.path)
    }
}
