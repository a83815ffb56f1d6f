use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::deepsearch::FinalAnswer;
use crate::intent::IntentRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Chat,
    Console,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplyKind {
    Answer,
    FollowUp,
    Refusal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTurn {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ReplyKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<FinalAnswer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
}

/// Per-session state. `memory` only ever gains keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub channel: Channel,
    pub turns: Vec<SessionTurn>,
    pub memory: BTreeMap<String, String>,
    /// Partial intent while a follow-up is outstanding.
    pub pending: Option<IntentRecord>,
    /// Follow-ups asked for the pending request.
    pub follow_ups: usize,
    /// Fields asked about so far for the pending request.
    pub asked: Vec<String>,
    /// User messages of the pending request.
    pub request_messages: Vec<String>,
}

impl Session {
    pub fn new(id: impl Into<String>, channel: Channel) -> Self {
        Self {
            id: id.into(),
            channel,
            turns: Vec::new(),
            memory: BTreeMap::new(),
            pending: None,
            follow_ups: 0,
            asked: Vec::new(),
            request_messages: Vec::new(),
        }
    }

    /// Record non-empty field values; existing keys are updated, never removed.
    pub fn remember(&mut self, fields: &BTreeMap<String, String>) {
        for (k, v) in fields {
            if !v.trim().is_empty() {
                self.memory.insert(k.clone(), v.trim().to_string());
            }
        }
    }

    pub fn awaiting_follow_up(&self) -> bool {
        self.pending.is_some()
    }

    pub fn assistant_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.role == Role::Assistant).count()
    }

    pub(crate) fn finish_request(&mut self) {
        self.pending = None;
        self.follow_ups = 0;
        self.asked.clear();
        self.request_messages.clear();
    }
}
