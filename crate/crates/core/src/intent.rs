use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestType {
    Consultation,
    Troubleshooting,
}

impl RequestType {
    pub fn name(self) -> &'static str {
        match self {
            RequestType::Consultation => "consultation",
            RequestType::Troubleshooting => "troubleshooting",
        }
    }
}

impl fmt::Display for RequestType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A clarified, structured request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentRecord {
    pub request_type: RequestType,
    pub clarified_text: String,
    /// Required-field groups rendered as `a|b` for any-of groups.
    pub required_fields: Vec<String>,
    pub missing_fields: Vec<String>,
    pub extracted: BTreeMap<String, String>,
    #[serde(default)]
    pub keywords: Vec<String>,
    /// Clarification gave up with fields still missing.
    #[serde(default)]
    pub incomplete: bool,
}

impl IntentRecord {
    pub fn new(request_type: RequestType, clarified_text: impl Into<String>) -> Self {
        Self {
            request_type,
            clarified_text: clarified_text.into(),
            required_fields: Vec::new(),
            missing_fields: Vec::new(),
            extracted: BTreeMap::new(),
            keywords: Vec::new(),
            incomplete: false,
        }
    }

    pub fn with_field(mut self, name: &str, value: impl Into<String>) -> Self {
        self.extracted.insert(name.to_string(), value.into());
        self
    }

    pub fn is_complete(&self) -> bool {
        self.missing_fields.is_empty()
    }

    /// Text block used in stage prompts.
    pub fn render(&self) -> String {
        let mut out = format!("request type: {}\nquestion: {}\n", self.request_type, self.clarified_text);
        for (k, v) in &self.extracted {
            out.push_str(&format!("{k}: {v}\n"));
        }
        if !self.missing_fields.is_empty() {
            out.push_str(&format!("missing fields: {}\n", self.missing_fields.join(", ")));
        }
        out
    }
}
