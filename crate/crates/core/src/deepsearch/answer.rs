//! The structured final answer.

use serde::{Deserialize, Serialize};

use crate::intent::RequestType;
use crate::llm::{FieldKind, FieldSpec, SchemaDescriptor};

/// Flags an answer may carry.
pub mod flags {
    /// The loop stopped on the budget before the planner was satisfied.
    pub const PARTIAL: &str = "partial";
    /// The answer is the configured safe-response template.
    pub const SAFE_RESPONSE: &str = "safe_response";
    /// A cited id was not in the evidence and was removed.
    pub const CITATION_STRIPPED: &str = "citation_stripped";
    /// Summarization failed and an SOP branch was emitted verbatim.
    pub const SUMMARIZER_FALLBACK: &str = "summarizer_fallback";
    /// The request reached the engine with required fields still missing.
    pub const INCOMPLETE_INTENT: &str = "incomplete_intent";
    /// Filtering failed at least once and candidates were passed through.
    pub const FILTER_FAILED_OPEN: &str = "filter_failed_open";
    /// The planner failed at least once and a default retrieval was used.
    pub const PLANNER_DEGRADED: &str = "planner_degraded";
    /// A model provider failed outright.
    pub const PROVIDER_ERROR: &str = "provider_error";
    /// The answer was synthesized from a previously solved ticket.
    pub const QUICK_ANSWER: &str = "quick_answer";
    /// The request was judged simple and answered without retrieval.
    pub const DIRECT_ANSWER: &str = "direct_answer";
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub request_type: Option<RequestType>,
    #[serde(default)]
    pub root_cause: Option<String>,
    #[serde(default)]
    pub explanation: String,
    #[serde(default)]
    pub confirmed_findings: Vec<String>,
    #[serde(default)]
    pub hypotheses: Vec<String>,
    #[serde(default)]
    pub citations: Vec<String>,
    #[serde(default)]
    pub investigation_steps: Vec<String>,
    #[serde(default)]
    pub resolution_steps: Vec<String>,
    #[serde(default)]
    pub recommendations: Vec<String>,
    #[serde(default)]
    pub missing_information: Vec<String>,
    #[serde(default)]
    pub flags: Vec<String>,
    /// Human-readable rendering of the fields above.
    #[serde(default)]
    pub text: String,
}

/// The part of the answer the summarizer writes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryDraft {
    #[serde(default)]
    pub root_cause: Option<String>,
    #[serde(default)]
    pub explanation: String,
    #[serde(default)]
    pub confirmed_findings: Vec<String>,
    #[serde(default)]
    pub hypotheses: Vec<String>,
    #[serde(default)]
    pub citations: Vec<String>,
    #[serde(default)]
    pub investigation_steps: Vec<String>,
    #[serde(default)]
    pub resolution_steps: Vec<String>,
    #[serde(default)]
    pub recommendations: Vec<String>,
    #[serde(default)]
    pub missing_information: Vec<String>,
}

impl SummaryDraft {
    pub fn schema() -> SchemaDescriptor {
        SchemaDescriptor::new(
            "final_answer",
            vec![
                FieldSpec::required("explanation", FieldKind::String),
                FieldSpec::required("citations", FieldKind::Array),
                FieldSpec::optional("root_cause", FieldKind::String),
                FieldSpec::optional("confirmed_findings", FieldKind::Array),
                FieldSpec::optional("hypotheses", FieldKind::Array),
                FieldSpec::optional("investigation_steps", FieldKind::Array),
                FieldSpec::optional("resolution_steps", FieldKind::Array),
                FieldSpec::optional("recommendations", FieldKind::Array),
                FieldSpec::optional("missing_information", FieldKind::Array),
            ],
        )
    }

    pub fn output_format(request_type: RequestType) -> &'static str {
        match request_type {
            RequestType::Troubleshooting => {
                r#"Reply with one JSON object:
{"root_cause": "<most likely root cause>",
 "explanation": "<short diagnosis>",
 "confirmed_findings": ["<claims supported by cited evidence>"],
 "hypotheses": ["<plausible but unconfirmed claims>"],
 "citations": ["<evidence ids such as sop-0001 or obs-2>"],
 "investigation_steps": ["<step>"],
 "resolution_steps": ["<step>"],
 "missing_information": ["<what would be needed for a definitive answer>"]}
Cite only ids that appear in the evidence list."#
            }
            RequestType::Consultation => {
                r#"Reply with one JSON object:
{"explanation": "<concise explanation>",
 "recommendations": ["<recommended usage>"],
 "citations": ["<evidence ids>"],
 "missing_information": ["<what is still unclear>"]}
Cite only ids that appear in the evidence list."#
            }
        }
    }
}

impl FinalAnswer {
    pub fn from_draft(request_type: RequestType, d: SummaryDraft) -> Self {
        Self {
            request_type: Some(request_type),
            root_cause: d.root_cause.filter(|r| !r.trim().is_empty()),
            explanation: d.explanation,
            confirmed_findings: d.confirmed_findings,
            hypotheses: d.hypotheses,
            citations: d.citations,
            investigation_steps: d.investigation_steps,
            resolution_steps: d.resolution_steps,
            recommendations: d.recommendations,
            missing_information: d.missing_information,
            flags: Vec::new(),
            text: String::new(),
        }
    }

    pub fn safe_response(request_type: Option<RequestType>, template: &str) -> Self {
        Self {
            request_type,
            explanation: template.to_string(),
            flags: vec![flags::SAFE_RESPONSE.to_string()],
            ..Default::default()
        }
    }

    pub fn flag(&mut self, f: &str) {
        if !self.flags.iter().any(|x| x == f) {
            self.flags.push(f.to_string());
        }
    }

    pub fn has_flag(&self, f: &str) -> bool {
        self.flags.iter().any(|x| x == f)
    }

    /// Fill `text` from the structured fields.
    pub fn render(&mut self, missing_tag: &str) {
        let mut out = String::new();
        if let Some(rc) = &self.root_cause {
            out.push_str(&format!("Most likely root cause: {rc}\n"));
        }
        if !self.explanation.is_empty() {
            out.push_str(&self.explanation);
            out.push('\n');
        }
        let list = |out: &mut String, title: &str, items: &[String], numbered: bool| {
            if items.is_empty() {
                return;
            }
            out.push_str(&format!("\n{title}:\n"));
            for (i, it) in items.iter().enumerate() {
                if numbered {
                    out.push_str(&format!("{}. {it}\n", i + 1));
                } else {
                    out.push_str(&format!("- {it}\n"));
                }
            }
        };
        list(&mut out, "Confirmed findings", &self.confirmed_findings, false);
        list(&mut out, "Hypotheses (unconfirmed)", &self.hypotheses, false);
        list(&mut out, "Investigation steps", &self.investigation_steps, true);
        list(&mut out, "Resolution steps", &self.resolution_steps, true);
        list(&mut out, "Recommendations", &self.recommendations, false);
        if !self.missing_information.is_empty() {
            out.push('\n');
            for m in &self.missing_information {
                out.push_str(&format!("[{missing_tag}] {m}\n"));
            }
        }
        if !self.citations.is_empty() {
            out.push_str(&format!("\nSources: {}\n", self.citations.iter().map(|c| format!("[{c}]")).collect::<Vec<_>>().join(" ")));
        }
        self.text = out.trim_end().to_string();
    }
}
