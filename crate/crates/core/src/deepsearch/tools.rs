//! Platform tools available to the planner.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::decision::ToolCall;
use crate::text::truncate_head_tail;

pub type ToolHandler = Arc<dyn Fn(&BTreeMap<String, Value>) -> Result<String, String> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArgSpec {
    pub name: String,
    pub required: bool,
    pub description: String,
}

#[derive(Clone)]
pub struct Tool {
    pub description: String,
    pub args: Vec<ArgSpec>,
    handler: ToolHandler,
}

impl fmt::Debug for Tool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tool").field("description", &self.description).field("args", &self.args).finish()
    }
}

/// What a tool call produced, as stored in the evidence and the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolObservation {
    pub name: String,
    pub args: BTreeMap<String, Value>,
    pub ok: bool,
    pub output: String,
    #[serde(default)]
    pub truncated: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, Tool>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tool; a second registration under the same name is refused.
    pub fn register(
        &mut self,
        name: &str,
        description: &str,
        args: Vec<ArgSpec>,
        handler: impl Fn(&BTreeMap<String, Value>) -> Result<String, String> + Send + Sync + 'static,
    ) -> Result<(), String> {
        if self.tools.contains_key(name) {
            return Err(format!("tool `{name}` is already registered"));
        }
        self.tools.insert(name.to_string(), Tool { description: description.into(), args, handler: Arc::new(handler) });
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.tools.keys().map(String::as_str).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    /// Tool list for the planner prompt.
    pub fn describe(&self) -> String {
        if self.tools.is_empty() {
            return "(no platform tools available)".into();
        }
        self.tools
            .iter()
            .map(|(name, t)| {
                let args: Vec<String> =
                    t.args.iter().map(|a| if a.required { a.name.clone() } else { format!("{}?", a.name) }).collect();
                format!("- {name}({}): {}", args.join(", "), t.description)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Run a call. Unknown tools, bad arguments and handler failures become
    /// error observations rather than errors.
    pub fn execute(&self, call: &ToolCall, cap_bytes: usize) -> ToolObservation {
        let fail = |kind: &str, detail: String| ToolObservation {
            name: call.name.clone(),
            args: call.args.clone(),
            ok: false,
            output: json!({"error": kind, "tool": call.name, "detail": detail}).to_string(),
            truncated: false,
        };
        let Some(tool) = self.tools.get(&call.name) else {
            return fail("unknown_tool", format!("no tool named `{}`; available: {}", call.name, self.names().join(", ")));
        };
        for a in tool.args.iter().filter(|a| a.required) {
            match call.args.get(&a.name) {
                None | Some(Value::Null) => return fail("argument_validation", format!("missing required argument `{}`", a.name)),
                Some(Value::String(s)) if s.trim().is_empty() => {
                    return fail("argument_validation", format!("argument `{}` is empty", a.name))
                }
                _ => {}
            }
        }
        if let Some(extra) = call.args.keys().find(|k| !tool.args.iter().any(|a| &a.name == *k)) {
            return fail("argument_validation", format!("unexpected argument `{extra}`"));
        }
        match (tool.handler)(&call.args) {
            Ok(out) => {
                let (output, truncated) = truncate_head_tail(&out, cap_bytes);
                ToolObservation { name: call.name.clone(), args: call.args.clone(), ok: true, output, truncated }
            }
            Err(e) => fail("tool_failed", e),
        }
    }

    /// `fetch_logs`, `fetch_metrics` and `fetch_config`, each reading
    /// `{dir}/{tool}/{task_id}.txt`.
    pub fn platform_stubs(dir: &Path) -> Self {
        let mut reg = Self::new();
        for (name, what) in [
            ("fetch_logs", "Fetch the driver and executor logs of a task."),
            ("fetch_metrics", "Fetch resource and runtime metrics of a task."),
            ("fetch_config", "Fetch the effective configuration of a task."),
        ] {
            let root: PathBuf = dir.join(name);
            let tool = name.to_string();
            reg.register(
                name,
                what,
                vec![ArgSpec { name: "task_id".into(), required: true, description: "platform task identifier".into() }],
                move |args| {
                    let id = arg_string(args, "task_id");
                    if id.contains(['/', '\\']) || id.contains("..") {
                        return Err(format!("invalid task id `{id}`"));
                    }
                    std::fs::read_to_string(root.join(format!("{id}.txt"))).map_err(|_| format!("no {tool} data for task {id}"))
                },
            )
            .expect("stub names are distinct");
        }
        reg
    }
}

/// String form of an argument; numbers are rendered without quotes.
pub fn arg_string(args: &BTreeMap<String, Value>, name: &str) -> String {
    match args.get(name) {
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
        None => String::new(),
    }
}
