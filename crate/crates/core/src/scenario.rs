//! Scripted diagnosis scenarios: a rule script, an intent and the expected
//! shape of the resulting trace, run against a world directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::deepsearch::trace::{FilterOutcome, StopReason, Trace};
use crate::deepsearch::{RetrievalMode, RunOptions, RunOutput};
use crate::intent::{IntentRecord, RequestType};
use crate::kb::Level;
use crate::llm::replay::{Script, ScriptRule, ScriptedProvider};
use crate::runtime::{Runtime, RuntimeError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioIntent {
    pub request_type: RequestType,
    pub clarified_text: String,
    #[serde(default)]
    pub fields: BTreeMap<String, String>,
}

impl ScenarioIntent {
    pub fn record(&self) -> IntentRecord {
        let mut r = IntentRecord::new(self.request_type, self.clarified_text.clone());
        r.extracted = self.fields.clone();
        r
    }
}

/// Overrides applied on top of the full hierarchical run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioOptions {
    pub mode: Option<RetrievalMode>,
    pub filter: Option<bool>,
    pub max_iterations: Option<usize>,
    pub max_chat_calls: Option<u32>,
    pub disabled: Vec<Level>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterationExpect {
    pub t: usize,
    pub level: Option<u8>,
    pub candidates: Option<usize>,
    pub kept: Option<usize>,
    pub ascend_clamped: Option<bool>,
    pub skip_clamped: Option<bool>,
    pub tool_ok: Option<bool>,
    pub degraded: Option<bool>,
    pub filter: Option<FilterOutcome>,
    pub kept_equals_candidates: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Expectation {
    pub stop_reason: Option<StopReason>,
    pub citations: Option<Vec<String>>,
    pub root_cause: Option<String>,
    pub retrieval_iterations: Option<usize>,
    pub iteration_count: Option<usize>,
    /// Level numbers of the retrieval iterations, in order.
    pub levels: Option<Vec<u8>>,
    pub flags: Vec<String>,
    pub absent_flags: Vec<String>,
    pub max_chat_calls: Option<u32>,
    pub iterations: Vec<IterationExpect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    #[serde(default)]
    pub description: String,
    pub intent: ScenarioIntent,
    #[serde(default)]
    pub options: ScenarioOptions,
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub expect: Expectation,
}

#[derive(Debug, Deserialize)]
struct Suite {
    scenarios: Vec<Scenario>,
}

pub fn load_suite(path: &Path) -> Result<Vec<Scenario>, RuntimeError> {
    let invalid = |detail: String| RuntimeError::Invalid { path: path.display().to_string(), detail };
    let text = fs::read_to_string(path).map_err(|e| invalid(e.to_string()))?;
    let suite: Suite = serde_json::from_str(&text).map_err(|e| invalid(e.to_string()))?;
    let mut seen = std::collections::BTreeSet::new();
    for s in &suite.scenarios {
        if !seen.insert(s.id.as_str()) {
            return Err(invalid(format!("duplicate scenario id `{}`", s.id)));
        }
    }
    Ok(suite.scenarios)
}

impl Scenario {
    pub fn run_options(&self, config: &Config) -> RunOptions {
        let o = &self.options;
        let mut budget = config.budget.budget();
        if let Some(c) = o.max_chat_calls {
            budget.max_chat_calls = c;
        }
        let mut opts = RunOptions::full(&config.search, budget);
        if let Some(m) = o.mode {
            opts.mode = m;
        }
        if let Some(f) = o.filter {
            opts.filter = f;
        }
        if let Some(t) = o.max_iterations {
            opts.max_iterations = t;
        }
        opts
    }

    /// Builds a fresh runtime over `world` with this scenario's script.
    pub fn runtime(&self, world: &Path, config: Config) -> Result<Runtime, RuntimeError> {
        let provider = ScriptedProvider::new(format!("scenario:{}", self.id), Script::new(self.rules.clone()))
            .map_err(|e| RuntimeError::Invalid { path: self.id.clone(), detail: e.to_string() })?;
        let rt = Runtime::from_world(world, Arc::new(provider), config)?;
        for level in &self.options.disabled {
            rt.hierarchy.set_level_enabled(*level, false)?;
        }
        Ok(rt)
    }

    pub fn run(&self, world: &Path, config: &Config) -> Result<RunOutput, RuntimeError> {
        let rt = self.runtime(world, config.clone())?;
        Ok(rt.engine.run(&self.intent.record(), &self.run_options(config)))
    }

    /// Invariant and expectation violations; empty when the run conforms.
    pub fn check(&self, out: &RunOutput, opts: &RunOptions) -> Vec<String> {
        let mut v = invariant_violations(&out.trace, opts);
        let e = &self.expect;
        let t = &out.trace;
        let a = &out.answer;
        if let Some(s) = e.stop_reason {
            if t.stop_reason != s {
                v.push(format!("stop reason {:?}, expected {:?}", t.stop_reason, s));
            }
        }
        if let Some(c) = &e.citations {
            if &a.citations != c {
                v.push(format!("citations {:?}, expected {:?}", a.citations, c));
            }
        }
        if let Some(rc) = &e.root_cause {
            if a.root_cause.as_deref() != Some(rc.as_str()) {
                v.push(format!("root cause {:?}, expected {rc:?}", a.root_cause));
            }
        }
        if let Some(n) = e.retrieval_iterations {
            if t.retrieval_iterations() != n {
                v.push(format!("{} retrieval iterations, expected {n}", t.retrieval_iterations()));
            }
        }
        if let Some(n) = e.iteration_count {
            if t.iterations.len() != n {
                v.push(format!("{} iterations, expected {n}", t.iterations.len()));
            }
        }
        if let Some(levels) = &e.levels {
            let got: Vec<u8> = t.levels().iter().map(|l| l.number()).collect();
            if &got != levels {
                v.push(format!("levels {got:?}, expected {levels:?}"));
            }
        }
        for f in &e.flags {
            if !a.has_flag(f) && !t.flags.contains(f) {
                v.push(format!("flag `{f}` missing"));
            }
        }
        for f in &e.absent_flags {
            if a.has_flag(f) || t.flags.contains(f) {
                v.push(format!("flag `{f}` unexpectedly set"));
            }
        }
        if let Some(max) = e.max_chat_calls {
            if t.usage.chat_calls > max {
                v.push(format!("{} chat calls, expected at most {max}", t.usage.chat_calls));
            }
        }
        for ie in &e.iterations {
            let Some(r) = t.iterations.iter().find(|r| r.t == ie.t) else {
                v.push(format!("iteration {} missing", ie.t));
                continue;
            };
            let mut check = |what: &str, ok: bool, got: String| {
                if !ok {
                    v.push(format!("iteration {}: {what} was {got}", ie.t));
                }
            };
            if let Some(l) = ie.level {
                check("level", r.level.map(Level::number) == Some(l), format!("{:?}", r.level));
            }
            if let Some(n) = ie.candidates {
                check("candidate count", r.candidates.len() == n, r.candidates.len().to_string());
            }
            if let Some(n) = ie.kept {
                check("kept count", r.kept.len() == n, r.kept.len().to_string());
            }
            if let Some(b) = ie.ascend_clamped {
                check("ascend_clamped", r.ascend_clamped == b, r.ascend_clamped.to_string());
            }
            if let Some(b) = ie.skip_clamped {
                check("skip_clamped", r.skip_clamped == b, r.skip_clamped.to_string());
            }
            if let Some(b) = ie.tool_ok {
                let ok = r.observation.as_ref().map(|o| o.ok);
                check("tool ok", ok == Some(b), format!("{ok:?}"));
            }
            if let Some(b) = ie.degraded {
                check("degraded", r.degraded == b, r.degraded.to_string());
            }
            if let Some(f) = ie.filter {
                check("filter outcome", r.filter == Some(f), format!("{:?}", r.filter));
            }
            if let Some(b) = ie.kept_equals_candidates {
                let same = r.kept == r.candidates.iter().map(|c| c.id.clone()).collect::<Vec<_>>();
                check("kept equals candidates", same == b, same.to_string());
            }
        }
        v
    }
}

/// Properties every loop trace must satisfy regardless of the script.
pub fn invariant_violations(t: &Trace, opts: &RunOptions) -> Vec<String> {
    let mut v = Vec::new();
    if t.iterations.len() > opts.max_iterations {
        v.push(format!("{} iterations exceed the cap {}", t.iterations.len(), opts.max_iterations));
    }
    for r in &t.iterations {
        if !r.kept_within_candidates() {
            v.push(format!("iteration {}: kept ids outside the candidates", r.t));
        }
    }
    if t.levels().windows(2).any(|w| w[1] < w[0]) {
        v.push(format!("levels ascend: {:?}", t.levels()));
    }
    for c in &t.answer.citations {
        if !t.evidence_ids.contains(c) {
            v.push(format!("citation `{c}` not among the evidence"));
        }
    }
    if t.usage.chat_calls > opts.budget.max_chat_calls {
        v.push(format!("{} chat calls exceed the budget {}", t.usage.chat_calls, opts.budget.max_chat_calls));
    }
    v
}

/// Mean retrieval iterations over a suite, with `adjust` applied to every
/// scenario's options first. Used for level ablations.
pub fn mean_retrieval_iterations(
    scenarios: &[Scenario],
    world: &Path,
    config: &Config,
    adjust: impl Fn(&mut ScenarioOptions),
) -> Result<f64, RuntimeError> {
    if scenarios.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0usize;
    for s in scenarios {
        let mut s = s.clone();
        adjust(&mut s.options);
        total += s.run(world, config)?.trace.retrieval_iterations();
    }
    Ok(total as f64 / scenarios.len() as f64)
}
