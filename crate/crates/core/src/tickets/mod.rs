//! Escalated tickets: labeling, cause attribution and the solved-case
//! repository.

pub mod bayes;
pub mod repo;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bayes::{AssignmentResult, CauseModel, Decision, LabeledTicket, ModelError};
pub use repo::{RepoMatch, SolvedTicket, TicketRepository};

use crate::intent::RequestType;
use crate::llm::{ChatRequest, FieldKind, FieldSpec, LlmError, LlmGateway, Message, RequestContext, SchemaDescriptor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    OnCallEngineer,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ticket {
    pub id: String,
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub outcome: String,
    #[serde(default = "epoch")]
    pub created_at: DateTime<Utc>,
}

fn epoch() -> DateTime<Utc> {
    DateTime::<Utc>::UNIX_EPOCH
}

impl Ticket {
    pub fn new(id: impl Into<String>, turns: Vec<Turn>, outcome: impl Into<String>) -> Self {
        Self { id: id.into(), turns, outcome: outcome.into(), created_at: epoch() }
    }

    pub fn is_empty(&self) -> bool {
        self.turns.iter().all(|t| t.text.trim().is_empty())
    }

    /// The conversation as `speaker: text` lines, followed by the outcome.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.turns {
            let who = match t.speaker {
                Speaker::User => "User",
                Speaker::OnCallEngineer => "On-call engineer",
                Speaker::Assistant => "Assistant",
            };
            out.push_str(&format!("{who}: {}\n", t.text.trim()));
        }
        if !self.outcome.trim().is_empty() {
            out.push_str(&format!("Outcome: {}\n", self.outcome.trim()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TicketLabels {
    #[serde(default)]
    pub system: String,
    #[serde(default)]
    pub module: String,
    pub request_type: RequestType,
    pub summary: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub final_actions: Vec<String>,
}

impl TicketLabels {
    /// Labels carrying only final actions (training fixtures).
    pub fn with_actions(final_actions: Vec<String>) -> Self {
        Self {
            system: String::new(),
            module: String::new(),
            request_type: RequestType::Troubleshooting,
            summary: "-".into(),
            keywords: Vec::new(),
            final_actions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Categorized {
    pub ticket_id: String,
    pub labels: TicketLabels,
    /// Final actions outside the vocabulary, dropped from the labels.
    #[serde(default)]
    pub dropped_actions: Vec<String>,
}

#[derive(Debug, Error)]
pub enum TicketError {
    #[error("ticket {0} has no content")]
    EmptyTicket(String),
    #[error("ticket {ticket_id} needs manual labeling: {reason}")]
    NeedsManualLabeling { ticket_id: String, reason: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path} line {line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
}

#[derive(Debug, Clone, Deserialize)]
struct RawLabels {
    system: String,
    module: String,
    request_type: RequestType,
    summary: String,
    #[serde(default)]
    keywords: Vec<String>,
    #[serde(default)]
    final_actions: Vec<String>,
}

pub fn label_schema() -> SchemaDescriptor {
    SchemaDescriptor::new(
        "ticket_labels",
        vec![
            FieldSpec::required("system", FieldKind::String),
            FieldSpec::required("module", FieldKind::String),
            FieldSpec::one_of("request_type", &["consultation", "troubleshooting"]),
            FieldSpec::required("summary", FieldKind::String),
            FieldSpec::optional("keywords", FieldKind::Array),
            FieldSpec::required("final_actions", FieldKind::Array),
        ],
    )
}

/// Lowercase with spaces and hyphens folded to underscores.
pub fn normalize_action(action: &str) -> String {
    action.trim().to_lowercase().split(|c: char| c.is_whitespace() || c == '-' || c == '_').filter(|s| !s.is_empty()).collect::<Vec<_>>().join("_")
}

/// Annotate a ticket with categorical and semantic labels.
pub fn categorize(
    gateway: &LlmGateway,
    ticket: &Ticket,
    vocabulary: &[String],
    ctx: &mut RequestContext,
) -> Result<Categorized, TicketError> {
    if ticket.is_empty() {
        return Err(TicketError::EmptyTicket(ticket.id.clone()));
    }
    let prompt = format!(
        "Annotate this support ticket.\n\n# Ticket {}\n{}\n# Labels\nReturn one JSON object with: system (affected system), \
         module (component), request_type (consultation or troubleshooting), summary (one sentence), keywords (list), \
         final_actions (what resolved the ticket, chosen from: {}).",
        ticket.id,
        ticket.render(),
        vocabulary.join(", ")
    );
    let req = ChatRequest::new("categorizer", vec![Message::system("You label operations tickets."), Message::user(prompt)]);
    let raw: RawLabels = match gateway.chat_structured(&req, &label_schema(), ctx) {
        Ok(r) => r,
        Err(LlmError::MalformedOutput { detail, .. }) => {
            return Err(TicketError::NeedsManualLabeling { ticket_id: ticket.id.clone(), reason: detail })
        }
        Err(e) => return Err(e.into()),
    };
    if raw.summary.trim().is_empty() {
        return Err(TicketError::NeedsManualLabeling { ticket_id: ticket.id.clone(), reason: "empty summary".into() });
    }
    let mut final_actions = Vec::new();
    let mut dropped = Vec::new();
    for a in &raw.final_actions {
        let n = normalize_action(a);
        if vocabulary.contains(&n) {
            if !final_actions.contains(&n) {
                final_actions.push(n);
            }
        } else {
            dropped.push(a.clone());
        }
    }
    if !dropped.is_empty() {
        tracing::info!(ticket = %ticket.id, ?dropped, "dropped final actions outside the vocabulary");
    }
    Ok(Categorized {
        ticket_id: ticket.id.clone(),
        labels: TicketLabels {
            system: raw.system,
            module: raw.module,
            request_type: raw.request_type,
            summary: raw.summary.trim().to_string(),
            keywords: raw.keywords,
            final_actions,
        },
        dropped_actions: dropped,
    })
}

/// Read line-delimited JSON records; blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, TicketError> {
    let text = fs::read_to_string(path).map_err(|source| TicketError::Io { path: path.display().to_string(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| TicketError::Parse { path: path.display().to_string(), line: i + 1, detail: e.to_string() })
        })
        .collect()
}

/// Append one record as a JSON line.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<(), TicketError> {
    let io = |source| TicketError::Io { path: path.display().to_string(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    let line = serde_json::to_string(record).expect("record serializes");
    writeln!(f, "{line}").map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::replay::{Script, ScriptRule, ScriptedProvider};
    use crate::llm::{Budget, HashingEmbedder};
    use std::sync::Arc;

    fn gateway(reply: &str) -> LlmGateway {
        let p = ScriptedProvider::new("s", Script::new(vec![ScriptRule::for_tag("categorizer", reply)])).unwrap();
        LlmGateway::new(Arc::new(p), Arc::new(HashingEmbedder::new(64)))
    }

    fn vocab() -> Vec<String> {
        ["schema_change", "fix_sql", "grant_permission"].iter().map(|s| s.to_string()).collect()
    }

    fn ticket() -> Ticket {
        Ticket::new("t1", vec![Turn { speaker: Speaker::User, text: "how do I set quota".into() }], "answered")
    }

    #[test]
    fn actions_are_normalized_and_unknown_dropped() {
        let g = gateway(
            r#"{"system":"Hive","module":"DDL","request_type":"troubleshooting","summary":"type mismatch","final_actions":["Schema Change","reboot the moon"]}"#,
        );
        let c = categorize(&g, &ticket(), &vocab(), &mut RequestContext::new(Budget::default())).unwrap();
        assert_eq!(c.labels.final_actions, vec!["schema_change"]);
        assert_eq!(c.dropped_actions, vec!["reboot the moon"]);
    }

    #[test]
    fn malformed_goes_to_manual_labeling() {
        let g = gateway("not json");
        let e = categorize(&g, &ticket(), &vocab(), &mut RequestContext::new(Budget::default())).unwrap_err();
        assert!(matches!(e, TicketError::NeedsManualLabeling { .. }));
        let empty = Ticket::new("t2", vec![], "");
        assert!(matches!(categorize(&g, &empty, &vocab(), &mut RequestContext::new(Budget::default())), Err(TicketError::EmptyTicket(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q/x.jsonl");
        append_jsonl(&p, &ticket()).unwrap();
        append_jsonl(&p, &ticket()).unwrap();
        let back: Vec<Ticket> = read_jsonl(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], ticket());
    }
}
