//! Structured troubleshooting procedures.
//!
//! Wire shape:
//!
//! ```json
//! {"problem_desc": "...",
//!  "content": [{"root_cause": "...",
//!               "investigation_steps": [{"step": "1", "target": "...", "action": "...",
//!                                        "observations": [{"condition": "...", "outcome": "confirmed"}]}],
//!               "resolution_steps": [{"step": "1", "action": "..."}]}]}
//! ```
//!
//! `step` may be a string or a number. `observations` may also be a single
//! string such as `"values are epoch ints -> confirmed; otherwise -> goto 2"`,
//! which is split on `;` or newlines.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use super::Provenance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SopRecord {
    pub problem_desc: String,
    pub content: Vec<RootCauseBranch>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootCauseBranch {
    pub root_cause: String,
    pub investigation_steps: Vec<InvestigationStep>,
    pub resolution_steps: Vec<ResolutionStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvestigationStep {
    #[serde(serialize_with = "ser_step", deserialize_with = "de_step")]
    pub step: u32,
    #[serde(default)]
    pub target: String,
    pub action: String,
    #[serde(default, deserialize_with = "de_observations")]
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionStep {
    #[serde(serialize_with = "ser_step", deserialize_with = "de_step")]
    pub step: u32,
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub condition: String,
    pub outcome: Outcome,
}

/// Where an observation leads: the branch's root cause is confirmed, or
/// investigation continues at another step of the same branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Confirmed,
    Goto(u32),
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Confirmed => f.write_str("confirmed"),
            Outcome::Goto(n) => write!(f, "goto {n}"),
        }
    }
}

impl Outcome {
    pub fn parse(text: &str) -> Option<Self> {
        static GOTO: OnceLock<Regex> = OnceLock::new();
        let t = text.trim().to_lowercase();
        if t == "confirmed" || t == "confirm" || t.starts_with("confirmed") {
            return Some(Outcome::Confirmed);
        }
        let re = GOTO.get_or_init(|| Regex::new(r"^go\s*to\s*(?:step\s*)?(\d+)$").expect("static regex"));
        re.captures(&t).and_then(|c| c[1].parse().ok()).map(Outcome::Goto)
    }
}

impl Serialize for Outcome {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Outcome {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Step(u32),
        }
        match Raw::deserialize(d)? {
            Raw::Step(n) => Ok(Outcome::Goto(n)),
            Raw::Text(t) => Outcome::parse(&t)
                .ok_or_else(|| de::Error::custom(format!("outcome must be `confirmed` or `goto <step>`, got `{t}`"))),
        }
    }
}

fn ser_step<S: Serializer>(step: &u32, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(step)
}

fn de_step<'de, D: Deserializer<'de>>(d: D) -> Result<u32, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(u32),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(n) => Ok(n),
        Raw::Text(t) => t
            .trim()
            .trim_start_matches(|c: char| !c.is_ascii_digit())
            .parse()
            .map_err(|_| de::Error::custom(format!("step must be a number, got `{t}`"))),
    }
}

fn de_observations<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Observation>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        List(Vec<Observation>),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::List(v) => Ok(v),
        Raw::Text(t) => Ok(parse_observation_text(&t)),
    }
}

/// Lenient parse of the free-text observation form. Clauses without a
/// recognizable outcome are dropped.
pub fn parse_observation_text(text: &str) -> Vec<Observation> {
    static CLAUSE: OnceLock<Regex> = OnceLock::new();
    let re = CLAUSE.get_or_init(|| {
        Regex::new(r"(?i)^(?:if\s+)?(?P<cond>.+?)\s*(?:->|=>|→|:|,\s*then)\s*(?P<out>confirmed|go\s*to\s*(?:step\s*)?\d+)\s*\.?$")
            .expect("static regex")
    });
    text.split([';', '\n'])
        .filter_map(|clause| {
            let c = re.captures(clause.trim())?;
            Some(Observation { condition: c["cond"].trim().to_string(), outcome: Outcome::parse(&c["out"])? })
        })
        .collect()
}

/// A broken structural rule, named after the rule.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SopViolation {
    #[error("empty_problem_desc: problem_desc is blank")]
    EmptyProblemDesc,
    #[error("no_branches: at least one root-cause branch is required")]
    NoBranches,
    #[error("empty_root_cause: branch {branch} has a blank root_cause")]
    EmptyRootCause { branch: usize },
    #[error("no_investigation_steps: branch {branch} has no investigation steps")]
    NoInvestigationSteps { branch: usize },
    #[error("no_resolution_steps: branch {branch} has no resolution steps")]
    NoResolutionSteps { branch: usize },
    #[error("non_consecutive_steps: branch {branch} {kind} steps must number 1..n, found {found:?}")]
    NonConsecutiveSteps { branch: usize, kind: &'static str, found: Vec<u32> },
    #[error("dangling_goto: branch {branch} step {step} jumps to missing step {target}")]
    DanglingGoto { branch: usize, step: u32, target: u32 },
    #[error("no_confirmed_outcome: branch {branch} never reaches a confirmed observation")]
    NoConfirmedOutcome { branch: usize },
}

impl SopViolation {
    /// Stable rule name, e.g. `no_branches`.
    pub fn rule(&self) -> &'static str {
        match self {
            SopViolation::EmptyProblemDesc => "empty_problem_desc",
            SopViolation::NoBranches => "no_branches",
            SopViolation::EmptyRootCause { .. } => "empty_root_cause",
            SopViolation::NoInvestigationSteps { .. } => "no_investigation_steps",
            SopViolation::NoResolutionSteps { .. } => "no_resolution_steps",
            SopViolation::NonConsecutiveSteps { .. } => "non_consecutive_steps",
            SopViolation::DanglingGoto { .. } => "dangling_goto",
            SopViolation::NoConfirmedOutcome { .. } => "no_confirmed_outcome",
        }
    }
}

fn consecutive(steps: impl Iterator<Item = u32>) -> Result<(), Vec<u32>> {
    let found: Vec<u32> = steps.collect();
    if found.iter().enumerate().all(|(i, s)| *s as usize == i + 1) {
        Ok(())
    } else {
        Err(found)
    }
}

impl RootCauseBranch {
    fn validate(&self, branch: usize) -> Result<(), SopViolation> {
        if self.root_cause.trim().is_empty() {
            return Err(SopViolation::EmptyRootCause { branch });
        }
        if self.investigation_steps.is_empty() {
            return Err(SopViolation::NoInvestigationSteps { branch });
        }
        if self.resolution_steps.is_empty() {
            return Err(SopViolation::NoResolutionSteps { branch });
        }
        consecutive(self.investigation_steps.iter().map(|s| s.step))
            .map_err(|found| SopViolation::NonConsecutiveSteps { branch, kind: "investigation", found })?;
        consecutive(self.resolution_steps.iter().map(|s| s.step))
            .map_err(|found| SopViolation::NonConsecutiveSteps { branch, kind: "resolution", found })?;
        let last = self.investigation_steps.len() as u32;
        for s in &self.investigation_steps {
            for o in &s.observations {
                if let Outcome::Goto(target) = o.outcome {
                    if target == 0 || target > last {
                        return Err(SopViolation::DanglingGoto { branch, step: s.step, target });
                    }
                }
            }
        }
        let confirmed = self
            .investigation_steps
            .iter()
            .flat_map(|s| &s.observations)
            .any(|o| o.outcome == Outcome::Confirmed);
        if !confirmed {
            return Err(SopViolation::NoConfirmedOutcome { branch });
        }
        Ok(())
    }

    /// Renumber both step lists from 1, remapping goto targets.
    pub fn renumber(&mut self) {
        let map: Vec<(u32, u32)> =
            self.investigation_steps.iter().enumerate().map(|(i, s)| (s.step, i as u32 + 1)).collect();
        for (i, s) in self.investigation_steps.iter_mut().enumerate() {
            s.step = i as u32 + 1;
            for o in &mut s.observations {
                if let Outcome::Goto(t) = o.outcome {
                    if let Some((_, new)) = map.iter().find(|(old, _)| *old == t) {
                        o.outcome = Outcome::Goto(*new);
                    }
                }
            }
        }
        for (i, s) in self.resolution_steps.iter_mut().enumerate() {
            s.step = i as u32 + 1;
        }
    }
}

impl SopRecord {
    /// Check every structural rule; the first violation found is returned.
    pub fn validate(&self) -> Result<(), SopViolation> {
        if self.problem_desc.trim().is_empty() {
            return Err(SopViolation::EmptyProblemDesc);
        }
        if self.content.is_empty() {
            return Err(SopViolation::NoBranches);
        }
        self.content.iter().enumerate().try_for_each(|(i, b)| b.validate(i + 1))
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("SOP records always serialize")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("SOP records always serialize")
    }

    pub fn root_causes(&self) -> Vec<&str> {
        self.content.iter().map(|b| b.root_cause.as_str()).collect()
    }

    /// Plain-text rendering used inside prompts.
    pub fn render(&self) -> String {
        let mut out = format!("problem: {}\n", self.problem_desc);
        for (i, b) in self.content.iter().enumerate() {
            out.push_str(&format!("branch {}: root cause: {}\n", i + 1, b.root_cause));
            for s in &b.investigation_steps {
                out.push_str(&format!("  check {}. [{}] {}\n", s.step, s.target, s.action));
                for o in &s.observations {
                    out.push_str(&format!("     if {} -> {}\n", o.condition, o.outcome));
                }
            }
            for s in &b.resolution_steps {
                out.push_str(&format!("  fix {}. {}\n", s.step, s.action));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> SopRecord {
        SopRecord::from_json(
            r#"{
              "problem_desc": "java.lang.NumberFormatException: For input string: 'xxx'",
              "content": [{
                "root_cause": "Column type in metadata does not match the actual stored data type.",
                "investigation_steps": [
                  {"step": "1", "target": "Column schema", "action": "Compare the declared column type with the real stored values",
                   "observations": [{"condition": "declared bigint but values are datetime strings", "outcome": "confirmed"},
                                    {"condition": "types agree", "outcome": "goto 2"}]},
                  {"step": 2, "target": "Raw data", "action": "Scan for stray characters",
                   "observations": "stray characters present -> confirmed"}
                ],
                "resolution_steps": [{"step": "1", "action": "Rename the old column and add a correctly typed one"}]
              }]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn parses_mixed_step_and_observation_forms() {
        let r = sample();
        r.validate().unwrap();
        let b = &r.content[0];
        assert_eq!(b.investigation_steps[1].step, 2);
        assert_eq!(b.investigation_steps[0].observations[1].outcome, Outcome::Goto(2));
        assert_eq!(b.investigation_steps[1].observations[0].outcome, Outcome::Confirmed);
        let again = SopRecord::from_json(&r.to_json()).unwrap();
        assert_eq!(again, r);
        assert!(r.to_json().contains(r#""step":"1""#));
    }

    #[test]
    fn observation_text_variants() {
        let obs = parse_observation_text("If values are epoch ints -> confirmed; otherwise => go to step 3\nnoise");
        assert_eq!(obs.len(), 2);
        assert_eq!(obs[0].condition, "values are epoch ints");
        assert_eq!(obs[1].outcome, Outcome::Goto(3));
        assert!(parse_observation_text("...").is_empty());
    }

    #[test]
    fn violations_are_named() {
        let mut r = sample();
        r.content.clear();
        assert_eq!(r.validate().unwrap_err().rule(), "no_branches");

        let mut r = sample();
        r.content[0].resolution_steps.clear();
        assert_eq!(r.validate().unwrap_err().rule(), "no_resolution_steps");

        let mut r = sample();
        r.content[0].investigation_steps[1].step = 3;
        assert_eq!(r.validate().unwrap_err().rule(), "non_consecutive_steps");

        let mut r = sample();
        r.content[0].investigation_steps[0].observations[1].outcome = Outcome::Goto(7);
        assert_eq!(r.validate().unwrap_err().rule(), "dangling_goto");

        let mut r = sample();
        for s in &mut r.content[0].investigation_steps {
            s.observations.retain(|o| o.outcome != Outcome::Confirmed);
        }
        assert_eq!(r.validate().unwrap_err().rule(), "no_confirmed_outcome");
    }

    #[test]
    fn renumber_remaps_gotos() {
        let mut r = sample();
        let b = &mut r.content[0];
        b.investigation_steps.reverse();
        b.renumber();
        assert_eq!(b.investigation_steps[0].action, "Scan for stray characters");
        assert_eq!(b.investigation_steps[1].observations[1].outcome, Outcome::Goto(1));
        r.validate().unwrap();
    }
}
