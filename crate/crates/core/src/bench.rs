//! Scripted benchmark: run labeled cases through one of four answering
//! strategies and score the root-cause label.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deepsearch::{flags, FinalAnswer, RunOptions, Trace};
use crate::par::{self, ExecPolicy};
use crate::pipeline::{Channel, Pipeline, PipelineError, PipelineTrace};
use crate::tickets::{read_jsonl, TicketError};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchRequest {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub context: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    pub id: String,
    pub request: BenchRequest,
    pub expected_root_cause: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_sop_id: Option<String>,
    #[serde(default)]
    pub has_logs: bool,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Io(#[from] TicketError),
    #[error("case {0}: expected_root_cause is empty")]
    EmptyLabel(String),
    #[error("duplicate case id {0}")]
    DuplicateId(String),
}

/// Read a line-delimited case file and check its invariants.
pub fn load_cases(path: &Path) -> Result<Vec<BenchCase>, BenchError> {
    let cases: Vec<BenchCase> = read_jsonl(path)?;
    let mut seen = std::collections::BTreeSet::new();
    for c in &cases {
        if c.expected_root_cause.trim().is_empty() {
            return Err(BenchError::EmptyLabel(c.id.clone()));
        }
        if !seen.insert(c.id.as_str()) {
            return Err(BenchError::DuplicateId(c.id.clone()));
        }
    }
    Ok(cases)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    /// No retrieval.
    Cot,
    /// One flat retrieval, no filter.
    Rag,
    /// The loop over flat stores without filtering.
    #[serde(alias = "vanilla")]
    VanillaDeepsearch,
    /// The production path.
    Full,
}

impl BenchMode {
    pub const ALL: [BenchMode; 4] = [BenchMode::Cot, BenchMode::Rag, BenchMode::VanillaDeepsearch, BenchMode::Full];

    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Cot => "cot",
            BenchMode::Rag => "rag",
            BenchMode::VanillaDeepsearch => "vanilla_deepsearch",
            BenchMode::Full => "full",
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cot" => Ok(BenchMode::Cot),
            "rag" => Ok(BenchMode::Rag),
            "vanilla" | "vanilla_deepsearch" => Ok(BenchMode::VanillaDeepsearch),
            "full" => Ok(BenchMode::Full),
            other => Err(format!("unknown bench mode `{other}` (cot, rag, vanilla_deepsearch, full)")),
        }
    }
}

/// Lowercase, punctuation folded to single spaces.
pub fn normalize_label(s: &str) -> String {
    s.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect::<Vec<_>>().join(" ")
}

/// One case answered, before scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseOutcome {
    pub answer: FinalAnswer,
    /// Present for `full`; the other modes have no pipeline stages.
    pub pipeline_trace: Option<PipelineTrace>,
    pub trace: Option<Trace>,
}

impl CaseOutcome {
    pub fn iterations(&self) -> usize {
        self.trace.as_ref().map(Trace::retrieval_iterations).unwrap_or(0)
    }
}

/// Answer one case in the given mode.
pub fn run_case(pipeline: &Pipeline, case: &BenchCase, mode: BenchMode) -> CaseOutcome {
    let text = Some(case.request.text.as_str()).filter(|t| !t.trim().is_empty());
    let ctx = &case.request.context;
    if mode == BenchMode::Full {
        let pt = match pipeline.diagnose(text, ctx) {
            Ok(out) => {
                let answer = out.reply.answer().cloned().unwrap_or_default();
                return CaseOutcome { answer, trace: out.trace.deepsearch.clone(), pipeline_trace: Some(out.trace) };
            }
            Err(PipelineError::SchemaValidation { .. }) | Err(PipelineError::EmptyMessage) => PipelineTrace::new(Channel::Console),
        };
        // Cases without full console context still get a clarified intent.
        let mut pt = pt;
        let intent = pipeline.context_intent(text, ctx);
        let answer = pipeline.execute(&intent, &mut pt);
        return CaseOutcome { answer, trace: pt.deepsearch.clone(), pipeline_trace: Some(pt) };
    }
    let s = pipeline.settings();
    let opts = match mode {
        BenchMode::Cot => RunOptions::direct(&s.search, s.budget),
        BenchMode::Rag => RunOptions::single_shot(&s.search, s.budget),
        BenchMode::VanillaDeepsearch => RunOptions::vanilla(&s.search, s.budget),
        BenchMode::Full => unreachable!("handled above"),
    };
    let intent = pipeline.context_intent(text, ctx);
    let out = pipeline.engine().run(&intent, &opts);
    CaseOutcome { answer: out.answer, trace: Some(out.trace), pipeline_trace: None }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub id: String,
    #[serde(rename = "match")]
    pub matched: bool,
    pub errored: bool,
    pub iterations: usize,
    pub wall_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_cause: Option<String>,
    #[serde(default)]
    pub citations: Vec<String>,
    /// The expected SOP id, when the case names one, appears among the citations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cited_expected_sop: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub cases: Vec<CaseRow>,
    pub scored: usize,
    pub matches: usize,
    pub errored: usize,
    /// matches / scored; errored cases are excluded.
    pub accuracy: f64,
    pub mean_latency_ms: f64,
    pub p90_latency_ms: f64,
    pub mean_iterations: f64,
}

/// Nearest-rank percentile of unsorted values; 0 for an empty slice.
pub fn nearest_rank(values: &[f64], pct: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl BenchReport {
    /// Aggregate per-case rows. Latency and iterations cover every case.
    pub fn from_rows(mode: BenchMode, cases: Vec<CaseRow>) -> Self {
        let scored = cases.iter().filter(|c| !c.errored).count();
        let matches = cases.iter().filter(|c| !c.errored && c.matched).count();
        let lat: Vec<f64> = cases.iter().map(|c| c.wall_ms).collect();
        Self {
            mode,
            scored,
            matches,
            errored: cases.len() - scored,
            accuracy: if scored == 0 { 0.0 } else { matches as f64 / scored as f64 },
            mean_latency_ms: mean(lat.iter().copied()),
            p90_latency_ms: nearest_rank(&lat, 90.0),
            mean_iterations: mean(cases.iter().map(|c| c.iterations as f64)),
            cases,
        }
    }

    /// True when the stored aggregates equal a recomputation from the rows.
    pub fn is_consistent(&self) -> bool {
        *self == Self::from_rows(self.mode, self.cases.clone())
    }

    /// One JSON line per case, then a summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for c in &self.cases {
            let mut v = serde_json::to_value(c).expect("row serializes");
            v["type"] = "case".into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        let summary = serde_json::json!({
            "type": "summary",
            "mode": self.mode,
            "cases": self.cases.len(),
            "scored": self.scored,
            "matches": self.matches,
            "errored": self.errored,
            "accuracy": self.accuracy,
            "mean_latency_ms": self.mean_latency_ms,
            "p90_latency_ms": self.p90_latency_ms,
            "mean_iterations": self.mean_iterations,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

/// Score one outcome against its case.
pub fn score(case: &BenchCase, outcome: &CaseOutcome, wall_ms: f64) -> CaseRow {
    let a = &outcome.answer;
    let errored = a.has_flag(flags::PROVIDER_ERROR);
    if errored {
        tracing::warn!(case = %case.id, "case errored (provider failure or missing transcript); excluded from accuracy");
    }
    let matched = a.root_cause.as_deref().is_some_and(|rc| normalize_label(rc) == normalize_label(&case.expected_root_cause));
    CaseRow {
        id: case.id.clone(),
        matched,
        errored,
        iterations: outcome.iterations(),
        wall_ms,
        root_cause: a.root_cause.clone(),
        citations: a.citations.clone(),
        cited_expected_sop: case.expected_sop_id.as_ref().map(|id| a.citations.contains(id)),
    }
}

/// Run every case, in parallel when `exec` allows. Rows keep case order.
pub fn run_bench_detailed(pipeline: &Pipeline, cases: &[BenchCase], mode: BenchMode, exec: ExecPolicy) -> (BenchReport, Vec<CaseOutcome>) {
    let results = par::map(exec, cases, |case| {
        let start = Instant::now();
        let out = run_case(pipeline, case, mode);
        let ms = start.elapsed().as_secs_f64() * 1000.0;
        (score(case, &out, ms), out)
    });
    let (rows, outs): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    (BenchReport::from_rows(mode, rows), outs)
}

pub fn run_bench(pipeline: &Pipeline, cases: &[BenchCase], mode: BenchMode, exec: ExecPolicy) -> BenchReport {
    run_bench_detailed(pipeline, cases, mode, exec).0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, matched: bool, errored: bool, it: usize, ms: f64) -> CaseRow {
        CaseRow { id: id.into(), matched, errored, iterations: it, wall_ms: ms, root_cause: None, citations: vec![], cited_expected_sop: None }
    }

    #[test]
    fn aggregates_follow_rows() {
        let rows: Vec<CaseRow> = (1..=10).map(|i| row(&format!("c{i}"), i % 3 != 0, i == 10, i % 4, i as f64 * 10.0)).collect();
        let r = BenchReport::from_rows(BenchMode::Rag, rows);
        assert_eq!(r.scored, 9);
        assert_eq!(r.errored, 1);
        assert_eq!(r.matches, 6);
        assert!((r.accuracy - 6.0 / 9.0).abs() < 1e-12);
        assert_eq!(r.p90_latency_ms, 90.0);
        assert_eq!(r.mean_latency_ms, 55.0);
        assert!(r.is_consistent());
        let text = r.to_jsonl();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 11);
        assert!(lines[10].contains("\"type\":\"summary\""));
    }

    #[test]
    fn nearest_rank_edges() {
        assert_eq!(nearest_rank(&[], 90.0), 0.0);
        assert_eq!(nearest_rank(&[5.0], 90.0), 5.0);
        assert_eq!(nearest_rank(&[3.0, 1.0, 2.0], 50.0), 2.0);
        assert_eq!(nearest_rank(&[3.0, 1.0, 2.0], 100.0), 3.0);
    }

    #[test]
    fn labels_normalize() {
        assert_eq!(normalize_label("  Column-type  MISMATCH. "), "column type mismatch");
        assert_eq!("vanilla".parse::<BenchMode>().unwrap(), BenchMode::VanillaDeepsearch);
        assert!("x".parse::<BenchMode>().is_err());
    }
}
