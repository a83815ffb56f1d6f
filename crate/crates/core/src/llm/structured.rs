//! Machine-readable stage outputs.
//!
//! Stage prompts ask for a single JSON object. Models wrap it in prose or
//! code fences often enough that extraction has to be forgiving: we take the
//! first fenced block that parses, else the first `{` from which a complete
//! JSON object can be read. The object is then checked against a
//! [`SchemaDescriptor`] and decoded into the stage's own type. On the first
//! failure the gateway re-prompts once with the validation error.

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use super::{ChatRequest, LlmError, LlmGateway, Message, RequestContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    String,
    Bool,
    Number,
    Array,
    Object,
    Any,
}

impl FieldKind {
    fn accepts(self, v: &Value) -> bool {
        match self {
            FieldKind::String => v.is_string(),
            FieldKind::Bool => v.is_boolean(),
            FieldKind::Number => v.is_number(),
            FieldKind::Array => v.is_array(),
            FieldKind::Object => v.is_object(),
            FieldKind::Any => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub name: &'static str,
    pub kind: FieldKind,
    pub required: bool,
    pub allowed: Option<&'static [&'static str]>,
}

impl FieldSpec {
    pub const fn required(name: &'static str, kind: FieldKind) -> Self {
        Self { name, kind, required: true, allowed: None }
    }

    pub const fn optional(name: &'static str, kind: FieldKind) -> Self {
        Self { name, kind, required: false, allowed: None }
    }

    pub const fn one_of(name: &'static str, allowed: &'static [&'static str]) -> Self {
        Self { name, kind: FieldKind::String, required: true, allowed: Some(allowed) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemaDescriptor {
    pub name: &'static str,
    pub fields: Vec<FieldSpec>,
}

impl SchemaDescriptor {
    pub fn new(name: &'static str, fields: Vec<FieldSpec>) -> Self {
        Self { name, fields }
    }

    pub fn validate(&self, record: &Map<String, Value>) -> Result<(), String> {
        for f in &self.fields {
            match record.get(f.name) {
                None | Some(Value::Null) if f.required => {
                    return Err(format!("missing required field `{}`", f.name));
                }
                None | Some(Value::Null) => {}
                Some(v) => {
                    if !f.kind.accepts(v) {
                        return Err(format!("field `{}` has the wrong type", f.name));
                    }
                    if let (Some(allowed), Some(s)) = (f.allowed, v.as_str()) {
                        if !allowed.contains(&s) {
                            return Err(format!("field `{}` must be one of {:?}, got `{s}`", f.name, allowed));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Field list in the form used inside prompts.
    pub fn describe(&self) -> String {
        self.fields
            .iter()
            .map(|f| {
                let req = if f.required { "required" } else { "optional" };
                match f.allowed {
                    Some(a) => format!("- {} ({req}): one of {}", f.name, a.join(" | ")),
                    None => format!("- {} ({req}): {:?}", f.name, f.kind).to_lowercase(),
                }
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Find the JSON object in a model reply.
pub fn extract_object(text: &str) -> Option<Map<String, Value>> {
    for block in fenced_blocks(text) {
        if let Some(obj) = first_object(block) {
            return Some(obj);
        }
    }
    first_object(text)
}

fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        // skip an info string such as `json`
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let body = &after[body_start..];
        match body.find("```") {
            Some(end) => {
                out.push(&body[..end]);
                rest = &body[end + 3..];
            }
            None => break,
        }
    }
    out
}

fn first_object(text: &str) -> Option<Map<String, Value>> {
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

/// Parse and validate one reply without any retry.
pub fn parse_record(text: &str, schema: &SchemaDescriptor) -> Result<Map<String, Value>, String> {
    let record = extract_object(text).ok_or_else(|| "no JSON object found in the reply".to_string())?;
    schema.validate(&record)?;
    Ok(record)
}

/// Parse, validate and decode into `T`.
pub fn parse_typed<T: DeserializeOwned>(text: &str, schema: &SchemaDescriptor) -> Result<T, String> {
    let record = parse_record(text, schema)?;
    serde_json::from_value(Value::Object(record)).map_err(|e| format!("record does not decode: {e}"))
}

impl LlmGateway {
    /// Chat, then parse the reply against `schema`. A failed parse triggers
    /// exactly one repair request carrying the validation error; a second
    /// failure is `MalformedOutput`. Budget and transport errors pass
    /// through unchanged.
    pub fn chat_structured<T: DeserializeOwned>(
        &self,
        request: &ChatRequest,
        schema: &SchemaDescriptor,
        ctx: &mut RequestContext,
    ) -> Result<T, LlmError> {
        let first = self.chat(request, ctx)?;
        let err = match parse_typed::<T>(&first.text, schema) {
            Ok(v) => return Ok(v),
            Err(e) => e,
        };
        let mut repair = request.clone();
        repair.messages.push(Message::assistant(first.text));
        repair.messages.push(Message::user(format!(
            "Your previous output was invalid: {err}. Reply with only one JSON object with these fields:\n{}",
            schema.describe()
        )));
        let second = self.chat(&repair, ctx)?;
        parse_typed::<T>(&second.text, schema)
            .map_err(|detail| LlmError::MalformedOutput { schema: schema.name.to_string(), detail })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::replay::{Script, ScriptRule, ScriptedProvider};
    use crate::llm::{Budget, HashingEmbedder};
    use serde::Deserialize;
    use std::sync::Arc;

    #[derive(Debug, Deserialize, PartialEq)]
    struct Verdict {
        is_valid: bool,
        reason: String,
    }

    fn schema() -> SchemaDescriptor {
        SchemaDescriptor::new(
            "verdict",
            vec![
                FieldSpec::required("is_valid", FieldKind::Bool),
                FieldSpec::one_of("reason", &["valid", "intermittent"]),
            ],
        )
    }

    #[test]
    fn happy_path() {
        let v: Verdict = parse_typed(r#"{"is_valid": true, "reason": "valid"}"#, &schema()).unwrap();
        assert_eq!(v, Verdict { is_valid: true, reason: "valid".into() });
    }

    #[test]
    fn wrapped_outputs_all_parse() {
        let obj = r#"{"is_valid": false, "reason": "intermittent"}"#;
        let pretty = "{\n  \"is_valid\": false,\n  \"reason\": \"intermittent\"\n}";
        let corpus = vec![
            obj.to_string(),
            format!("```json\n{obj}\n```"),
            format!("```\n{obj}\n```"),
            format!("Here is the result:\n```json\n{obj}\n```\nLet me know."),
            format!("Sure! {obj}"),
            format!("{obj} Hope this helps."),
            format!("Result: {pretty}"),
            format!("```JSON\n{pretty}\n```"),
            format!("Thinking... the ticket is flaky.\n\n{obj}"),
            format!("The set {{a, b}} is not JSON, but this is: {obj}"),
            format!("```text\nnot json\n```\n```json\n{obj}\n```"),
            format!("  \n\t{obj}\n\n"),
            format!("Answer:\n\n```json\n{pretty}\n```"),
            format!("> quoted reasoning\n{obj}"),
            format!("**Verdict**\n```json\n{obj}\n```\n**End**"),
            format!("{obj}\n{{\"trailing\": true}}"),
            format!("prefix {{ broken\n{obj}"),
            format!("Final JSON -> {pretty} <- done"),
            format!("```json\n{obj}```"),
            format!("Reasoning: the user says it's intermittent.\nOutput:\n```\n{pretty}\n```\n"),
        ];
        assert_eq!(corpus.len(), 20);
        for (i, text) in corpus.iter().enumerate() {
            let v: Verdict = parse_typed(text, &schema()).unwrap_or_else(|e| panic!("case {i}: {e}\n{text}"));
            assert_eq!(v.reason, "intermittent", "case {i}");
        }
    }

    #[test]
    fn enum_and_required_checks() {
        assert!(parse_record(r#"{"is_valid": true}"#, &schema()).unwrap_err().contains("reason"));
        assert!(parse_record(r#"{"is_valid": true, "reason": "other"}"#, &schema()).unwrap_err().contains("one of"));
        assert!(parse_record(r#"{"is_valid": "yes", "reason": "valid"}"#, &schema()).is_err());
        assert!(parse_record("no json here", &schema()).is_err());
    }

    fn gateway(script: Script) -> (LlmGateway, Arc<ScriptedProvider>) {
        let p = Arc::new(ScriptedProvider::new("s", script).unwrap());
        (LlmGateway::new(p.clone(), Arc::new(HashingEmbedder::new(16))), p)
    }

    #[test]
    fn missing_field_twice_is_malformed() {
        let (gw, p) = gateway(Script::new(vec![ScriptRule::respond(r#"{"is_valid": true}"#)]));
        let mut ctx = RequestContext::new(Budget::default());
        let req = ChatRequest::new("screener", vec![Message::user("ticket")]);
        let err = gw.chat_structured::<Verdict>(&req, &schema(), &mut ctx).unwrap_err();
        assert!(matches!(err, LlmError::MalformedOutput { .. }));
        assert_eq!(p.calls(), 2);
    }

    #[test]
    fn one_repair_retry_recovers() {
        let (gw, p) = gateway(Script::new(vec![
            ScriptRule::respond(r#"{"is_valid": true, "reason": "valid"}"#).when("previous output was invalid"),
            ScriptRule::respond("I think it is valid."),
        ]));
        let mut ctx = RequestContext::new(Budget::default());
        let req = ChatRequest::new("screener", vec![Message::user("ticket")]);
        let v: Verdict = gw.chat_structured(&req, &schema(), &mut ctx).unwrap();
        assert!(v.is_valid);
        assert_eq!(p.calls(), 2);
        assert_eq!(ctx.budget.chat_calls, 2);
    }
}
