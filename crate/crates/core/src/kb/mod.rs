//! Leveled knowledge storage and two-stage retrieval.
//!
//! Retrieval runs coarse -> rerank -> top-k -> dedup. The coarse stage
//! unions the N best lexical matches with the N nearest key embeddings; the
//! rerank stage fuses both rank lists with reciprocal-rank fusion.

pub mod hierarchy;
pub mod ingest;
pub mod lexical;
pub mod retrieval;
pub mod sop;
pub mod store;
pub mod web;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::LlmError;

pub use hierarchy::KnowledgeHierarchy;
pub use retrieval::{rerank, Candidate, Candidates, RRF_K};
pub use sop::{InvestigationStep, Observation, Outcome, ResolutionStep, RootCauseBranch, SopRecord, SopViolation};
pub use store::{KnowledgeStore, SopWrite};
pub use web::{DirectoryWebProvider, WebPage, WebResults, WebSearchProvider};

/// Knowledge levels, searched top-down. `General` is the model's own
/// knowledge and has no storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Sop,
    Internal,
    Web,
    General,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Sop, Level::Internal, Level::Web, Level::General];
    pub const RETRIEVABLE: [Level; 3] = [Level::Sop, Level::Internal, Level::Web];

    pub fn number(self) -> u8 {
        match self {
            Level::Sop => 1,
            Level::Internal => 2,
            Level::Web => 3,
            Level::General => 4,
        }
    }

    pub fn from_number(n: u64) -> Option<Self> {
        match n {
            1 => Some(Level::Sop),
            2 => Some(Level::Internal),
            3 => Some(Level::Web),
            4 => Some(Level::General),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Sop => "sop",
            Level::Internal => "internal",
            Level::Web => "web",
            Level::General => "general",
        }
    }

    pub fn next(self) -> Option<Self> {
        Self::from_number(u64::from(self.number()) + 1)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Level {
    type Err = String;

    /// Accepts `1`, `level 1`, `Level1`, `sop`, `SOP`, `internal`, ...
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_lowercase();
        let t = t.trim_start_matches("level").trim();
        if let Ok(n) = t.parse::<u64>() {
            return Self::from_number(n).ok_or_else(|| format!("no knowledge level {n}"));
        }
        match t {
            "sop" | "sops" => Ok(Level::Sop),
            "internal" | "domain" => Ok(Level::Internal),
            "web" | "external" => Ok(Level::Web),
            "general" | "model" => Ok(Level::General),
            other => Err(format!("unknown knowledge level `{other}`")),
        }
    }
}

/// Where an entry came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Manual,
    Distilled { ticket_id: String },
    Web { url: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub id: String,
    pub level: Level,
    pub base_id: String,
    pub key: String,
    pub value: String,
    #[serde(default)]
    pub provenance: Vec<Provenance>,
}

impl KnowledgeEntry {
    pub fn new(id: impl Into<String>, level: Level, base_id: impl Into<String>, key: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            level,
            base_id: base_id.into(),
            key: key.into(),
            value: value.into(),
            provenance: vec![Provenance::Manual],
        }
    }

    pub fn from_sop(id: impl Into<String>, base_id: impl Into<String>, record: &SopRecord) -> Self {
        Self {
            id: id.into(),
            level: Level::Sop,
            base_id: base_id.into(),
            key: record.problem_desc.clone(),
            value: record.to_json(),
            provenance: record.provenance.clone(),
        }
    }

    /// Parsed SOP for level-1 entries.
    pub fn sop(&self) -> Option<SopRecord> {
        (self.level == Level::Sop).then(|| SopRecord::from_json(&self.value).ok()).flatten()
    }

    /// Text shown to downstream stages.
    pub fn display_text(&self) -> String {
        match self.sop() {
            Some(r) => r.render(),
            None if self.value.is_empty() => self.key.clone(),
            None => format!("{}\n{}", self.key, self.value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    /// Entry id, or the page URL for web results.
    pub id: String,
    pub level: Level,
    pub score: f64,
    pub text: String,
}

/// Output of one retrieval: ordered by descending score, unique ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSet {
    pub items: Vec<EvidenceItem>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl EvidenceSet {
    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub const DEFAULT_LOOP_K: usize = 5;
pub const DEFAULT_SINGLE_SHOT_K: usize = 10;
pub const DEFAULT_COARSE_N: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub text: String,
    pub level: Level,
    pub k: usize,
    pub n: usize,
    /// Restrict level-2 retrieval to one base; all bases when absent.
    #[serde(default)]
    pub base: Option<String>,
}

impl RetrievalQuery {
    pub fn new(text: impl Into<String>, level: Level) -> Self {
        Self { text: text.into(), level, k: DEFAULT_LOOP_K, n: DEFAULT_COARSE_N, base: None }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn in_base(mut self, base: impl Into<String>) -> Self {
        self.base = Some(base.into());
        self
    }

    pub fn validate(&self) -> Result<(), KbError> {
        if self.k == 0 || self.n < self.k {
            return Err(KbError::InvalidQuery(format!("need n >= k >= 1, got k={} n={}", self.k, self.n)));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("level 4 has no storage; answer from model knowledge instead")]
    Level4Requested,
    #[error("knowledge level {0} is disabled")]
    LevelDisabled(Level),
    #[error("no knowledge base `{0}`")]
    UnknownBase(String),
    #[error("no entry `{0}`")]
    UnknownEntry(String),
    #[error("replace target `{0}` does not exist")]
    UnknownReplaceTarget(String),
    #[error("entry `{0}` already exists")]
    DuplicateId(String),
    #[error("entry key is empty")]
    EmptyKey,
    #[error("store `{base}` holds level {expected} entries, got level {got}")]
    WrongLevel { base: String, expected: Level, got: Level },
    #[error("validation failed: {0}")]
    ValidationFailed(#[from] SopViolation),
    #[error("embedding failed: {0}")]
    Embedding(#[from] LlmError),
    #[error("web provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
}
