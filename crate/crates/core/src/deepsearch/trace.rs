//! Per-run trace and its line-delimited export.

use serde::{Deserialize, Serialize};

use super::answer::FinalAnswer;
use super::decision::PlannerDecision;
use super::tools::ToolObservation;
use crate::kb::Level;
use crate::llm::BudgetTracker;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    AnswerReady,
    IterationCap,
    BudgetExhausted,
    /// The planner asked for Level 4 or no enabled level was left.
    RetrievalExhausted,
    ProviderError,
    /// Strategies without a loop.
    NoLoop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterOutcome {
    Applied,
    Disabled,
    /// Not enough budget left; candidates passed through.
    SkippedBudget,
    /// The filter reply was unusable; candidates passed through.
    FailedOpen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRef {
    pub id: String,
    pub level: Level,
    pub score: f64,
}

/// One completed action iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub decision: PlannerDecision,
    /// The planner reply could not be parsed and a default retrieval ran.
    #[serde(default)]
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<Level>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default)]
    pub ascend_clamped: bool,
    #[serde(default)]
    pub skip_clamped: bool,
    #[serde(default)]
    pub candidates: Vec<CandidateRef>,
    #[serde(default)]
    pub kept: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<ToolObservation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl IterationRecord {
    pub fn is_retrieval(&self) -> bool {
        self.level.is_some()
    }

    /// Every kept id is one of the candidates.
    pub fn kept_within_candidates(&self) -> bool {
        self.kept.iter().all(|k| self.candidates.iter().any(|c| &c.id == k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetUsage {
    pub chat_calls: u32,
    pub total_tokens: u64,
    pub max_chat_calls: u32,
    pub max_total_tokens: u64,
}

impl From<&BudgetTracker> for BudgetUsage {
    fn from(b: &BudgetTracker) -> Self {
        Self {
            chat_calls: b.chat_calls,
            total_tokens: b.total_tokens,
            max_chat_calls: b.budget.max_chat_calls,
            max_total_tokens: b.budget.max_total_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub query: String,
    pub iterations: Vec<IterationRecord>,
    pub stop_reason: StopReason,
    /// Ids of all evidence the summarizer saw, in order.
    pub evidence_ids: Vec<String>,
    pub answer: FinalAnswer,
    pub usage: BudgetUsage,
    #[serde(default)]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum TraceLine {
    Iteration(IterationRecord),
    Final {
        query: String,
        stop_reason: StopReason,
        evidence_ids: Vec<String>,
        answer: FinalAnswer,
        usage: BudgetUsage,
        flags: Vec<String>,
    },
}

impl Trace {
    pub fn retrieval_iterations(&self) -> usize {
        self.iterations.iter().filter(|r| r.is_retrieval()).count()
    }

    /// Retrieval levels in the order they were visited.
    pub fn levels(&self) -> Vec<Level> {
        self.iterations.iter().filter_map(|r| r.level).collect()
    }

    /// One JSON object per iteration, then one for the outcome.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.iterations {
            out.push_str(&serde_json::to_string(&TraceLine::Iteration(r.clone())).expect("trace serializes"));
            out.push('\n');
        }
        let last = TraceLine::Final {
            query: self.query.clone(),
            stop_reason: self.stop_reason,
            evidence_ids: self.evidence_ids.clone(),
            answer: self.answer.clone(),
            usage: self.usage,
            flags: self.flags.clone(),
        };
        out.push_str(&serde_json::to_string(&last).expect("trace serializes"));
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, String> {
        let mut iterations = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            match serde_json::from_str::<TraceLine>(line).map_err(|e| format!("line {}: {e}", n + 1))? {
                TraceLine::Iteration(r) => iterations.push(r),
                TraceLine::Final { query, stop_reason, evidence_ids, answer, usage, flags } => {
                    return Ok(Self { query, iterations, stop_reason, evidence_ids, answer, usage, flags })
                }
            }
        }
        Err("trace has no final line".into())
    }
}
