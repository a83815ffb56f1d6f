//! Planner output and the level policy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::kb::{KnowledgeHierarchy, Level};
use crate::llm::{FieldKind, FieldSpec, SchemaDescriptor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    #[serde(default)]
    pub args: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Tool(ToolCall),
    Retrieve { level: Level, query: String },
}

/// One planning step. When `ans_ready` is set the action is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDecision", into = "RawDecision")]
pub struct PlannerDecision {
    pub ans_ready: bool,
    pub action: Option<Action>,
    pub reason: Option<String>,
}

impl PlannerDecision {
    pub fn ready() -> Self {
        Self { ans_ready: true, action: None, reason: None }
    }

    pub fn retrieve(level: Level, query: impl Into<String>) -> Self {
        Self { ans_ready: false, action: Some(Action::Retrieve { level, query: query.into() }), reason: None }
    }

    pub fn tool(name: impl Into<String>, args: BTreeMap<String, Value>) -> Self {
        Self { ans_ready: false, action: Some(Action::Tool(ToolCall { name: name.into(), args })), reason: None }
    }

    pub fn schema() -> SchemaDescriptor {
        SchemaDescriptor::new(
            "planner_decision",
            vec![
                FieldSpec::required("ans_ready", FieldKind::Bool),
                FieldSpec::optional("act", FieldKind::String),
                FieldSpec::optional("tool", FieldKind::Object),
                FieldSpec::optional("level", FieldKind::Any),
                FieldSpec::optional("query", FieldKind::String),
                FieldSpec::optional("reason", FieldKind::String),
            ],
        )
    }

    /// Text for the planner prompt's output-format section.
    pub fn output_format() -> &'static str {
        r#"Reply with one JSON object:
{"ans_ready": true|false,
 "act": "tool" | "retrieve",
 "tool": {"name": "<tool name>", "args": {"<arg>": "<value>"}},
 "level": <1-4>,
 "query": "<retrieval query>",
 "reason": "<one sentence>"}
Set "tool" only when act is "tool"; set "level" and "query" only when act is "retrieve"."#
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawDecision {
    ans_ready: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    act: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tool: Option<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    level: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
}

fn parse_level(v: &Value) -> Result<Level, String> {
    match v {
        Value::Number(n) => n.as_u64().and_then(Level::from_number).ok_or_else(|| format!("level must be 1-4, got {n}")),
        Value::String(s) => s.parse(),
        other => Err(format!("level must be a number, got {other}")),
    }
}

impl TryFrom<RawDecision> for PlannerDecision {
    type Error = String;

    fn try_from(raw: RawDecision) -> Result<Self, Self::Error> {
        if raw.ans_ready {
            return Ok(Self { ans_ready: true, action: None, reason: raw.reason });
        }
        let act = raw.act.as_deref().map(|a| a.trim().to_lowercase());
        let action = match act.as_deref() {
            Some("tool") => Action::Tool(raw.tool.ok_or("act is \"tool\" but no tool call was given")?),
            Some("retrieve") => {
                let level = parse_level(raw.level.as_ref().ok_or("act is \"retrieve\" but no level was given")?)?;
                let query = raw.query.filter(|q| !q.trim().is_empty()).ok_or("act is \"retrieve\" but no query was given")?;
                Action::Retrieve { level, query }
            }
            Some(other) => return Err(format!("act must be \"tool\" or \"retrieve\", got \"{other}\"")),
            None => return Err("ans_ready is false, so act is required".into()),
        };
        Ok(Self { ans_ready: false, action: Some(action), reason: raw.reason })
    }
}

impl From<PlannerDecision> for RawDecision {
    fn from(d: PlannerDecision) -> Self {
        let mut raw = RawDecision { ans_ready: d.ans_ready, act: None, tool: None, level: None, query: None, reason: d.reason };
        match d.action {
            Some(Action::Tool(call)) => {
                raw.act = Some("tool".into());
                raw.tool = Some(call);
            }
            Some(Action::Retrieve { level, query }) => {
                raw.act = Some("retrieve".into());
                raw.level = Some(Value::from(level.number()));
                raw.query = Some(query);
            }
            None => {}
        }
        raw
    }
}

/// Outcome of applying the level policy to a requested level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelStep {
    pub level: Level,
    /// The request asked to go back up and was held at the current level.
    pub ascend_clamped: bool,
    /// The request skipped past the next level and was held at it.
    pub skip_clamped: bool,
}

/// Stay at `current` or move to the next enabled level. A request above the
/// current level stays; a request further down than the next enabled level
/// is held at that next level. Disabled levels are passed over.
pub fn apply_level_policy(current: Level, requested: Level, hierarchy: &KnowledgeHierarchy) -> LevelStep {
    if requested <= current {
        return LevelStep { level: current, ascend_clamped: requested < current, skip_clamped: false };
    }
    let next = match current.next() {
        Some(n) => hierarchy.first_enabled_from(n),
        None => Level::General,
    };
    LevelStep { level: next, ascend_clamped: false, skip_clamped: requested > next }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::structured::parse_typed;

    fn parse(text: &str) -> Result<PlannerDecision, String> {
        parse_typed(text, &PlannerDecision::schema())
    }

    #[test]
    fn ready_ignores_action_fields() {
        let d = parse(r#"{"ans_ready": true, "act": "nonsense"}"#).unwrap();
        assert!(d.ans_ready && d.action.is_none());
    }

    #[test]
    fn retrieve_requires_level_and_query() {
        let d = parse(r#"{"ans_ready": false, "act": "retrieve", "level": 1, "query": "NumberFormatException insert"}"#).unwrap();
        assert_eq!(d.action, Some(Action::Retrieve { level: Level::Sop, query: "NumberFormatException insert".into() }));
        assert!(parse(r#"{"ans_ready": false, "act": "retrieve", "level": 1}"#).is_err());
        assert!(parse(r#"{"ans_ready": false, "act": "retrieve", "query": "x"}"#).is_err());
        assert!(parse(r#"{"ans_ready": false, "act": "retrieve", "level": 9, "query": "x"}"#).is_err());
        let d = parse(r#"{"ans_ready": false, "act": "retrieve", "level": "Level 2", "query": "x"}"#).unwrap();
        assert!(matches!(d.action, Some(Action::Retrieve { level: Level::Internal, .. })));
    }

    #[test]
    fn tool_requires_call() {
        let d = parse(r#"{"ans_ready": false, "act": "tool", "tool": {"name": "fetch_logs", "args": {"task_id": "123"}}}"#).unwrap();
        let Some(Action::Tool(call)) = d.action else { panic!() };
        assert_eq!(call.name, "fetch_logs");
        assert!(parse(r#"{"ans_ready": false, "act": "tool"}"#).is_err());
        assert!(parse(r#"{"ans_ready": false}"#).is_err());
    }

    #[test]
    fn query_carried_verbatim() {
        let q = "resolve alias count mismatch for LATERAL VIEW EXPLODE with multiple output columns";
        let d = parse(&format!(r#"{{"ans_ready": false, "act": "retrieve", "level": 2, "query": "{q}"}}"#)).unwrap();
        assert_eq!(d.action, Some(Action::Retrieve { level: Level::Internal, query: q.into() }));
    }

    #[test]
    fn round_trips_through_wire_shape() {
        let d = PlannerDecision::retrieve(Level::Web, "q");
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s, r#"{"ans_ready":false,"act":"retrieve","level":3,"query":"q"}"#);
        assert_eq!(serde_json::from_str::<PlannerDecision>(&s).unwrap(), d);
    }
}
