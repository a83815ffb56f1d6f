//! Turning free text or console context into an [`IntentRecord`].

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::Deserialize;
use serde_json::Value;

use crate::config::ClarificationConfig;
use crate::intent::{IntentRecord, RequestType};
use crate::llm::{ChatRequest, FieldKind, FieldSpec, LlmError, LlmGateway, Message, RequestContext, SchemaDescriptor};
use crate::text::trim_duplicate_stack_traces;

#[derive(Debug, Clone, Deserialize)]
pub(crate) struct ClarifierReply {
    pub request_type: RequestType,
    #[serde(default)]
    pub clarified_text: String,
    #[serde(default)]
    pub fields: BTreeMap<String, Value>,
    #[serde(default)]
    pub keywords: Vec<String>,
}

fn clarifier_schema() -> SchemaDescriptor {
    SchemaDescriptor::new(
        "clarified_request",
        vec![
            FieldSpec::one_of("request_type", &["consultation", "troubleshooting"]),
            FieldSpec::required("clarified_text", FieldKind::String),
            FieldSpec::required("fields", FieldKind::Object),
            FieldSpec::optional("keywords", FieldKind::Array),
        ],
    )
}

fn value_text(v: &Value) -> Option<String> {
    let s = match v {
        Value::Null => return None,
        Value::String(s) => s.trim().to_string(),
        other => other.to_string(),
    };
    (!s.is_empty()).then_some(s)
}

/// Collapse repeated stack frames in every field and the free text.
pub fn normalize_input(text: &str) -> String {
    trim_duplicate_stack_traces(text.trim())
}

/// Required groups for a request type, rendered `a|b` for any-of groups.
pub fn required_groups(cfg: &ClarificationConfig, rt: RequestType) -> Vec<Vec<String>> {
    cfg.required_fields.get(rt.name()).cloned().unwrap_or_default()
}

/// Groups with no field present in `fields`.
pub fn missing_groups(groups: &[Vec<String>], fields: &BTreeMap<String, String>) -> Vec<Vec<String>> {
    groups
        .iter()
        .filter(|g| !g.iter().any(|f| fields.get(f).is_some_and(|v| !v.trim().is_empty())))
        .cloned()
        .collect()
}

fn render_group(g: &[String]) -> String {
    g.join("|")
}

/// Build the intent record from collected fields, filling the required
/// and missing lists from the configured table.
pub fn assemble(
    cfg: &ClarificationConfig,
    rt: RequestType,
    clarified_text: String,
    fields: BTreeMap<String, String>,
    keywords: Vec<String>,
) -> IntentRecord {
    let groups = required_groups(cfg, rt);
    let missing = missing_groups(&groups, &fields);
    IntentRecord {
        request_type: rt,
        clarified_text,
        required_fields: groups.iter().map(|g| render_group(g)).collect(),
        missing_fields: missing.iter().map(|g| render_group(g)).collect(),
        extracted: fields,
        keywords,
        incomplete: false,
    }
}

/// The follow-up for the first missing group. Fields already asked about
/// are passed over while another field of the group can be asked.
pub fn follow_up_question(cfg: &ClarificationConfig, missing: &[Vec<String>], asked: &[String]) -> Option<(String, String)> {
    let group = missing.first()?;
    let field = group.iter().find(|f| !asked.contains(f)).or_else(|| group.first())?;
    let q = cfg.questions.get(field).cloned().unwrap_or_else(|| format!("Could you provide the {}?", field.replace('_', " ")));
    Some((field.clone(), q))
}

fn task_id_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(?:task|job)(?:[ _-]?id)?\s*[#:=]?\s*(\d{3,})").expect("static regex"))
}

fn error_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)(exception|error|failed|caused by|traceback|fatal)").expect("static regex"))
}

/// Does the text carry log material (an exception line or stack frames)?
pub fn looks_like_log(text: &str) -> bool {
    text.lines().any(|l| {
        let t = l.trim();
        t.starts_with("at ") || t.starts_with("Caused by") || t.contains("Exception") || t.contains("ERROR")
    })
}

/// The first line that reads like an error, else the first line.
pub fn first_error_line(text: &str) -> Option<String> {
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    lines.iter().find(|l| error_line_re().is_match(l)).or(lines.first()).map(|l| l.to_string())
}

/// Rule-based extraction used when the clarifier reply is unusable.
pub fn heuristic_fields(text: &str) -> (RequestType, BTreeMap<String, String>) {
    let mut fields = BTreeMap::new();
    if let Some(c) = task_id_re().captures(text) {
        fields.insert("task_id".to_string(), c[1].to_string());
    }
    let has_log = looks_like_log(text);
    if has_log {
        fields.insert("error_log".to_string(), text.trim().to_string());
    }
    let troubleshooting = has_log || error_line_re().is_match(text);
    if troubleshooting {
        if has_log {
            if let Some(l) = first_error_line(text) {
                fields.insert("symptom".to_string(), l);
            }
        }
        (RequestType::Troubleshooting, fields)
    } else {
        fields.insert("topic".to_string(), text.trim().to_string());
        (RequestType::Consultation, fields)
    }
}

pub(crate) fn clarify_prompt(cfg: &ClarificationConfig, memory: &BTreeMap<String, String>, messages: &[String]) -> String {
    let mut table = String::new();
    for (rt, groups) in &cfg.required_fields {
        let gs: Vec<String> = groups.iter().map(|g| if g.len() == 1 { g[0].clone() } else { format!("one of ({})", g.join(", ")) }).collect();
        table.push_str(&format!("- {rt}: {}\n", gs.join("; ")));
    }
    let mem = if memory.is_empty() {
        "(none)".to_string()
    } else {
        memory.iter().map(|(k, v)| format!("{k}: {v}")).collect::<Vec<_>>().join("\n")
    };
    let conv = messages.iter().enumerate().map(|(i, m)| format!("[message {}]\n{m}", i + 1)).collect::<Vec<_>>().join("\n");
    format!(
        "Rewrite the user's request into a structured form.\n\n# Required fields per request type\n{table}\n\
         # Already known\n{mem}\n\n# User messages\n{conv}\n\n\
         Reply with one JSON object: {{\"request_type\": \"consultation\" | \"troubleshooting\", \
         \"clarified_text\": \"<the request restated as one self-contained question>\", \
         \"fields\": {{\"<field>\": \"<value found in the messages>\"}}, \"keywords\": [\"<routing keywords>\"]}}. \
         Only fill fields whose values actually appear in the messages."
    )
}

pub(crate) fn call_clarifier(
    gateway: &LlmGateway,
    cfg: &ClarificationConfig,
    memory: &BTreeMap<String, String>,
    messages: &[String],
    ctx: &mut RequestContext,
) -> Result<ClarifierReply, LlmError> {
    let req = ChatRequest::new(
        "clarifier",
        vec![Message::system("You structure operations support requests."), Message::user(clarify_prompt(cfg, memory, messages))],
    );
    gateway.chat_structured(&req, &clarifier_schema(), ctx)
}

pub(crate) fn reply_fields(reply: &ClarifierReply) -> BTreeMap<String, String> {
    reply.fields.iter().filter_map(|(k, v)| value_text(v).map(|s| (k.clone(), normalize_input(&s)))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(kv: &[(&str, &str)]) -> BTreeMap<String, String> {
        kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn any_of_group_satisfied_by_either_member() {
        let cfg = ClarificationConfig::default();
        let groups = required_groups(&cfg, RequestType::Troubleshooting);
        assert_eq!(missing_groups(&groups, &map(&[("symptom", "x"), ("task_id", "1")])).len(), 0);
        assert_eq!(missing_groups(&groups, &map(&[("symptom", "x"), ("error_log", "e")])).len(), 0);
        let m = missing_groups(&groups, &map(&[("task_id", "1")]));
        assert_eq!(m, vec![vec!["symptom".to_string()]]);
        let rec = assemble(&cfg, RequestType::Troubleshooting, "q".into(), map(&[("symptom", " ")]), vec![]);
        assert_eq!(rec.missing_fields, vec!["symptom", "error_log|task_id"]);
        assert!(rec.missing_fields.iter().all(|m| rec.required_fields.contains(m)));
    }

    #[test]
    fn heuristic_extraction() {
        let (rt, f) = heuristic_fields("task 12345 failed:\njava.lang.NumberFormatException: For input string\n\tat X.y(Z.java:3)");
        assert_eq!(rt, RequestType::Troubleshooting);
        assert_eq!(f["task_id"], "12345");
        assert_eq!(f["symptom"], "task 12345 failed:");
        let (rt, f) = heuristic_fields("how do I configure table lifecycle?");
        assert_eq!(rt, RequestType::Consultation);
        assert!(f.contains_key("topic"));
    }

    #[test]
    fn question_skips_already_asked_member() {
        let cfg = ClarificationConfig::default();
        let missing = vec![vec!["error_log".to_string(), "task_id".to_string()]];
        assert_eq!(follow_up_question(&cfg, &missing, &[]).unwrap().0, "error_log");
        assert_eq!(follow_up_question(&cfg, &missing, &["error_log".into()]).unwrap().0, "task_id");
        assert!(follow_up_question(&cfg, &[], &[]).is_none());
    }
}
