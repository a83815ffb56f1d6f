//! The iterative plan, act, filter loop over the knowledge hierarchy.

pub mod answer;
pub mod decision;
pub mod tools;
pub mod trace;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use answer::{flags, FinalAnswer, SummaryDraft};
pub use decision::{apply_level_policy, Action, LevelStep, PlannerDecision, ToolCall};
pub use tools::{ArgSpec, ToolObservation, ToolRegistry};
pub use trace::{BudgetUsage, CandidateRef, FilterOutcome, IterationRecord, StopReason, Trace};

use crate::config::{SearchConfig, Templates};
use crate::intent::IntentRecord;
use crate::kb::{EvidenceItem, EvidenceSet, KnowledgeHierarchy, Level, RetrievalQuery};
use crate::llm::structured::parse_typed;
use crate::llm::{Budget, ChatRequest, FieldKind, FieldSpec, LlmError, LlmGateway, Message, RequestContext, SchemaDescriptor};

pub const PLANNER_TEMPLATE: &str = include_str!("../../templates/planner.md");

pub const DEFAULT_BACKGROUND: &str = "Users run SQL and batch jobs on a shared big data platform (Hive, Spark, \
Flink, HDFS, YARN). Failed tasks are identified by a numeric task id; their driver and executor logs, runtime \
metrics and effective configuration can be fetched with the platform tools.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Answer from model knowledge only.
    Direct,
    /// One flat retrieval, then summarize.
    SingleShot,
    Loop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    Hierarchical,
    /// Levels 1 and 2 act as one pooled level.
    Flat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub strategy: Strategy,
    pub mode: RetrievalMode,
    pub filter: bool,
    pub max_iterations: usize,
    pub k: usize,
    pub single_shot_k: usize,
    pub n: usize,
    pub observation_cap_bytes: usize,
    pub budget: Budget,
}

impl RunOptions {
    /// Hierarchical loop with filtering.
    pub fn full(search: &SearchConfig, budget: Budget) -> Self {
        Self {
            strategy: Strategy::Loop,
            mode: RetrievalMode::Hierarchical,
            filter: true,
            max_iterations: search.max_iterations,
            k: search.loop_k,
            single_shot_k: search.single_shot_k,
            n: search.coarse_n,
            observation_cap_bytes: search.observation_cap_bytes,
            budget,
        }
    }

    /// Flat loop without the filter.
    pub fn vanilla(search: &SearchConfig, budget: Budget) -> Self {
        Self { mode: RetrievalMode::Flat, filter: false, ..Self::full(search, budget) }
    }

    pub fn single_shot(search: &SearchConfig, budget: Budget) -> Self {
        Self { strategy: Strategy::SingleShot, mode: RetrievalMode::Flat, filter: false, ..Self::full(search, budget) }
    }

    pub fn direct(search: &SearchConfig, budget: Budget) -> Self {
        Self { strategy: Strategy::Direct, filter: false, ..Self::full(search, budget) }
    }

    pub fn with_mode(mut self, mode: RetrievalMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_max_iterations(mut self, t: usize) -> Self {
        self.max_iterations = t;
        self
    }
}

/// Where a piece of evidence came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionDescriptor {
    Retrieve { level: Level, query: String },
    Tool { name: String, args: std::collections::BTreeMap<String, Value> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceGroup {
    pub action: ActionDescriptor,
    pub items: Vec<EvidenceItem>,
}

/// Loop state: the intent, append-only evidence, the iteration counter and
/// the current level.
#[derive(Debug, Clone, PartialEq)]
pub struct SolvingState {
    pub intent: IntentRecord,
    evidence: Vec<EvidenceGroup>,
    pub iteration: usize,
    pub current_level: Level,
}

impl SolvingState {
    pub fn new(intent: IntentRecord, start: Level) -> Self {
        Self { intent, evidence: Vec::new(), iteration: 0, current_level: start }
    }

    pub fn push(&mut self, group: EvidenceGroup) {
        self.evidence.push(group);
    }

    pub fn evidence(&self) -> &[EvidenceGroup] {
        &self.evidence
    }

    /// Evidence items in first-seen order, unique by id.
    pub fn items(&self) -> Vec<&EvidenceItem> {
        let mut seen = BTreeSet::new();
        self.evidence.iter().flat_map(|g| g.items.iter()).filter(|i| seen.insert(i.id.as_str())).collect()
    }

    pub fn has_evidence(&self) -> bool {
        self.evidence.iter().any(|g| !g.items.is_empty())
    }

    /// One line per action taken so far, with what it contributed.
    pub fn render_history(&self) -> String {
        if self.evidence.is_empty() {
            return "(none)".into();
        }
        self.evidence
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let ids: Vec<&str> = g.items.iter().map(|x| x.id.as_str()).collect();
                match &g.action {
                    ActionDescriptor::Retrieve { level, query } => {
                        format!("{}. retrieve level {}: {query} -> kept [{}]", i + 1, level.number(), ids.join(", "))
                    }
                    ActionDescriptor::Tool { name, args } => {
                        let a: Vec<String> = args.keys().map(|k| format!("{k}={}", tools::arg_string(args, k))).collect();
                        format!("{}. tool {name}({}) -> [{}]", i + 1, a.join(", "), ids.join(", "))
                    }
                }
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// `[id] text` lines for prompts.
    pub fn render_evidence(&self) -> String {
        let items = self.items();
        if items.is_empty() {
            return "(none)".into();
        }
        items.iter().map(|i| format!("[{}] {}", i.id, i.text)).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, Deserialize)]
struct FilterReply {
    relevant_ids: Vec<Value>,
}

fn filter_schema() -> SchemaDescriptor {
    SchemaDescriptor::new("filter", vec![FieldSpec::required("relevant_ids", FieldKind::Array)])
}

/// Result of one run. Model exchanges are kept beside the trace, not in it.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub answer: FinalAnswer,
    pub trace: Trace,
    pub context: RequestContext,
}

pub struct DeepSearch {
    gateway: Arc<LlmGateway>,
    hierarchy: Arc<KnowledgeHierarchy>,
    tools: Arc<ToolRegistry>,
    templates: Templates,
    planner_template: String,
    background: String,
}

impl DeepSearch {
    pub fn new(gateway: Arc<LlmGateway>, hierarchy: Arc<KnowledgeHierarchy>, tools: Arc<ToolRegistry>) -> Self {
        Self {
            gateway,
            hierarchy,
            tools,
            templates: Templates::default(),
            planner_template: PLANNER_TEMPLATE.to_string(),
            background: DEFAULT_BACKGROUND.to_string(),
        }
    }

    pub fn with_templates(mut self, templates: Templates) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_planner_template(mut self, template: impl Into<String>) -> Self {
        self.planner_template = template.into();
        self
    }

    pub fn with_background(mut self, background: impl Into<String>) -> Self {
        self.background = background.into();
        self
    }

    pub fn hierarchy(&self) -> &Arc<KnowledgeHierarchy> {
        &self.hierarchy
    }

    pub fn gateway(&self) -> &Arc<LlmGateway> {
        &self.gateway
    }

    pub fn tools(&self) -> &Arc<ToolRegistry> {
        &self.tools
    }

    pub fn templates(&self) -> &Templates {
        &self.templates
    }

    fn pooled_flat(&self, mode: RetrievalMode) -> bool {
        mode == RetrievalMode::Flat && self.hierarchy.is_enabled(Level::Sop) && self.hierarchy.is_enabled(Level::Internal)
    }

    fn start_level(&self) -> Level {
        self.hierarchy.first_enabled_from(Level::Sop)
    }

    /// Retriever list for the planner prompt.
    pub fn describe_retrievers(&self, mode: RetrievalMode) -> String {
        let h = &self.hierarchy;
        let state = |l: Level| if h.is_enabled(l) { "" } else { " (disabled)" };
        let mut lines = Vec::new();
        if self.pooled_flat(mode) {
            lines.push("- Level 1 & 2 (knowledge base): SOPs and internal documents searched as one collection.".to_string());
        } else {
            lines.push(format!("- Level 1 (SOP knowledge base){}: validated troubleshooting procedures.", state(Level::Sop)));
            let bases: Vec<&str> = h.internal_stores().iter().map(|s| s.base_id()).collect();
            let names = if bases.is_empty() { String::new() } else { format!(" [{}]", bases.join(", ")) };
            lines.push(format!(
                "- Level 2 (internal professional knowledge){}{names}: product manuals and engineering documents.",
                state(Level::Internal)
            ));
        }
        lines.push(format!("- Level 3 (open web search){}: public documentation and forums.", state(Level::Web)));
        lines.push("- Level 4 (general knowledge): no retriever; the model's own knowledge.".to_string());
        lines.join("\n")
    }

    fn planner_prompt(&self, state: &SolvingState, mode: RetrievalMode) -> String {
        let level = match state.current_level {
            Level::Internal if self.pooled_flat(mode) => 1,
            l => l.number(),
        };
        self.planner_template
            .replace("{{tools}}", &self.tools.describe())
            .replace("{{retrievers}}", &self.describe_retrievers(mode))
            .replace("{{background}}", &self.background)
            .replace("{{query}}", state.intent.render().trim_end())
            .replace("{{current_level}}", &level.to_string())
            .replace("{{history}}", &state.render_history())
            .replace("{{evidence}}", &state.render_evidence())
            .replace("{{output_format}}", PlannerDecision::output_format())
    }

    /// Ask the planner for the next decision.
    pub fn plan(&self, state: &SolvingState, mode: RetrievalMode, ctx: &mut RequestContext) -> Result<PlannerDecision, LlmError> {
        let req = ChatRequest::new("planner", vec![Message::user(self.planner_prompt(state, mode))]);
        self.gateway.chat_structured(&req, &PlannerDecision::schema(), ctx)
    }

    /// Level policy with levels 1 and 2 merged in pooled flat mode.
    fn next_level(&self, current: Level, requested: Level, mode: RetrievalMode) -> LevelStep {
        if !self.pooled_flat(mode) {
            return apply_level_policy(current, requested, &self.hierarchy);
        }
        let merge = |l: Level| if l == Level::Internal { Level::Sop } else { l };
        let (cur, req) = (merge(current), merge(requested));
        let mut step = apply_level_policy(cur, req, &self.hierarchy);
        if step.level == Level::Internal {
            let next = self.hierarchy.first_enabled_from(Level::Web);
            step = LevelStep { level: next, ascend_clamped: false, skip_clamped: req > next };
        }
        step
    }

    fn retrieve(&self, level: Level, query: &str, k: usize, n: usize, mode: RetrievalMode) -> EvidenceSet {
        let q = RetrievalQuery::new(query, level).with_k(k).with_n(n);
        let res = match level {
            Level::Sop | Level::Internal if mode == RetrievalMode::Flat => self.hierarchy.retrieve_flat(&q),
            _ => self.hierarchy.retrieve(&q),
        };
        res.unwrap_or_else(|e| {
            tracing::warn!(error = %e, "retrieval failed");
            EvidenceSet { items: Vec::new(), flags: vec!["retrieval_error".into()] }
        })
    }

    /// Keep the candidates the filter stage judges relevant, in their
    /// original order.
    pub fn filter_evidence(
        &self,
        intent: &IntentRecord,
        query: &str,
        candidates: &EvidenceSet,
        ctx: &mut RequestContext,
    ) -> Result<Vec<EvidenceItem>, LlmError> {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let listing: Vec<String> = candidates.items.iter().map(|i| format!("[{}] {}", i.id, i.text)).collect();
        let prompt = format!(
            "Decide which retrieved items are relevant to the retrieval query and the user's request. \
             Discard irrelevant or noisy items.\n\n# Request\n{}\n# Retrieval query\n{query}\n\n# Candidates\n{}\n\n\
             Reply with one JSON object: {{\"relevant_ids\": [\"<id>\", ...]}}",
            intent.render(),
            listing.join("\n")
        );
        let req = ChatRequest::new("filter", vec![Message::user(prompt)]);
        let reply: FilterReply = self.gateway.chat_structured(&req, &filter_schema(), ctx)?;
        let keep: BTreeSet<String> = reply
            .relevant_ids
            .iter()
            .map(|v| match v {
                Value::String(s) => s.trim().to_string(),
                other => other.to_string(),
            })
            .collect();
        Ok(candidates.items.iter().filter(|i| keep.contains(&i.id)).cloned().collect())
    }

    fn summarize_prompt(&self, state: &SolvingState, stop: StopReason) -> String {
        let note = if stop == StopReason::RetrievalExhausted {
            "\nThe knowledge levels are exhausted; you may draw on general knowledge, marking such claims as hypotheses.\n"
        } else {
            ""
        };
        format!(
            "Write the final answer for the user's request from the evidence below. Separate confirmed findings, \
             which must be supported by cited evidence, from hypotheses. If the evidence is insufficient, say what \
             information is missing.{note}\n# Request\n{}\n# Evidence\n{}\n\n# Final Answer Format\n{}",
            state.intent.render(),
            state.render_evidence(),
            SummaryDraft::output_format(state.intent.request_type)
        )
    }

    /// Produce the final answer and apply the post-checks.
    pub fn summarize(&self, state: &SolvingState, stop: StopReason, ctx: &mut RequestContext) -> FinalAnswer {
        let rt = state.intent.request_type;
        let req = ChatRequest::new("summarizer", vec![Message::user(self.summarize_prompt(state, stop))]);
        let mut answer = match self.gateway.chat_structured::<SummaryDraft>(&req, &SummaryDraft::schema(), ctx) {
            Ok(draft) => FinalAnswer::from_draft(rt, draft),
            Err(LlmError::MalformedOutput { .. }) => {
                let fb = (stop == StopReason::AnswerReady).then(|| self.sop_fallback(state)).flatten();
                let mut a = fb.unwrap_or_else(|| FinalAnswer::safe_response(Some(rt), &self.templates.safe_response));
                a.flag(flags::SUMMARIZER_FALLBACK);
                a
            }
            Err(e) => {
                let mut a = FinalAnswer::safe_response(Some(rt), &self.templates.safe_response);
                if e.is_budget() {
                    a.flag(flags::PARTIAL);
                } else {
                    a.flag(flags::PROVIDER_ERROR);
                }
                a
            }
        };

        let known: BTreeSet<&str> = state.items().iter().map(|i| i.id.as_str()).collect();
        let mut stripped = false;
        let mut seen = BTreeSet::new();
        answer.citations.retain(|c| {
            if !known.contains(c.as_str()) {
                stripped = true;
                return false;
            }
            seen.insert(c.clone())
        });
        if stripped {
            answer.flag(flags::CITATION_STRIPPED);
        }
        if !state.has_evidence() && answer.missing_information.is_empty() {
            answer.missing_information.push("no supporting evidence was found in the knowledge base".into());
        }
        if state.intent.incomplete || !state.intent.missing_fields.is_empty() {
            answer.flag(flags::INCOMPLETE_INTENT);
            let note = format!("not provided: {}", state.intent.missing_fields.join(", "));
            if !state.intent.missing_fields.is_empty() && !answer.missing_information.contains(&note) {
                answer.missing_information.push(note);
            }
        }
        if stop == StopReason::BudgetExhausted {
            answer.flag(flags::PARTIAL);
        }
        answer.render(&self.templates.missing_information);
        answer
    }

    /// First branch of the most recent SOP in the evidence, verbatim.
    fn sop_fallback(&self, state: &SolvingState) -> Option<FinalAnswer> {
        let item = state.items().into_iter().rev().find(|i| i.level == Level::Sop && !i.id.starts_with("obs-"))?;
        let sop = self.hierarchy.entry(&item.id)?.sop()?;
        let branch = sop.content.first()?;
        Some(FinalAnswer {
            request_type: Some(state.intent.request_type),
            root_cause: Some(branch.root_cause.clone()),
            explanation: format!("Matched procedure: {}", sop.problem_desc),
            investigation_steps: branch.investigation_steps.iter().map(|s| format!("{}: {}", s.target, s.action)).collect(),
            resolution_steps: branch.resolution_steps.iter().map(|s| s.action.clone()).collect(),
            citations: vec![item.id.clone()],
            ..Default::default()
        })
    }

    /// Run one request end to end.
    pub fn run(&self, intent: &IntentRecord, opts: &RunOptions) -> RunOutput {
        let mut ctx = RequestContext::new(opts.budget);
        let mut state = SolvingState::new(intent.clone(), self.start_level());
        let mut records = Vec::new();
        let mut run_flags: Vec<String> = Vec::new();

        let stop = match opts.strategy {
            Strategy::Direct => StopReason::NoLoop,
            Strategy::SingleShot => {
                let set = self.retrieve(Level::Sop, &intent.clarified_text, opts.single_shot_k, opts.n, RetrievalMode::Flat);
                extend_flags(&mut run_flags, &set.flags);
                state.push(EvidenceGroup {
                    action: ActionDescriptor::Retrieve { level: Level::Sop, query: intent.clarified_text.clone() },
                    items: set.items,
                });
                StopReason::NoLoop
            }
            Strategy::Loop => self.run_loop(&mut state, opts, &mut ctx, &mut records, &mut run_flags),
        };

        let mut answer = self.summarize(&state, stop, &mut ctx);
        for f in &run_flags {
            if [flags::FILTER_FAILED_OPEN, flags::PLANNER_DEGRADED, flags::PROVIDER_ERROR].contains(&f.as_str()) {
                answer.flag(f);
            }
        }
        let trace = Trace {
            query: intent.clarified_text.clone(),
            iterations: records,
            stop_reason: stop,
            evidence_ids: state.items().iter().map(|i| i.id.clone()).collect(),
            answer: answer.clone(),
            usage: BudgetUsage::from(&ctx.budget),
            flags: run_flags,
        };
        RunOutput { answer, trace, context: ctx }
    }

    fn run_loop(
        &self,
        state: &mut SolvingState,
        opts: &RunOptions,
        ctx: &mut RequestContext,
        records: &mut Vec<IterationRecord>,
        run_flags: &mut Vec<String>,
    ) -> StopReason {
        let remaining = |ctx: &RequestContext| ctx.budget.budget.max_chat_calls.saturating_sub(ctx.budget.chat_calls);
        for t in 1..=opts.max_iterations.max(1) {
            // One call stays reserved for the summary.
            if remaining(ctx) <= 1 || ctx.budget.is_exhausted() {
                return StopReason::BudgetExhausted;
            }
            let (decision, degraded) = match self.plan(state, opts.mode, ctx) {
                Ok(d) => (d, false),
                Err(LlmError::MalformedOutput { .. }) => {
                    extend_flags(run_flags, &[flags::PLANNER_DEGRADED.to_string()]);
                    (PlannerDecision::retrieve(state.current_level, state.intent.clarified_text.clone()), true)
                }
                Err(e) if e.is_budget() => return StopReason::BudgetExhausted,
                Err(e) => {
                    tracing::warn!(error = %e, "planner call failed");
                    extend_flags(run_flags, &[flags::PROVIDER_ERROR.to_string()]);
                    return StopReason::ProviderError;
                }
            };
            if decision.ans_ready {
                return StopReason::AnswerReady;
            }
            state.iteration = t;
            let mut rec = IterationRecord {
                t,
                decision: decision.clone(),
                degraded,
                level: None,
                query: None,
                ascend_clamped: false,
                skip_clamped: false,
                candidates: Vec::new(),
                kept: Vec::new(),
                filter: None,
                observation: None,
                flags: Vec::new(),
            };
            match decision.action.clone().expect("not ready implies an action") {
                Action::Tool(call) => {
                    let obs = self.tools.execute(&call, opts.observation_cap_bytes);
                    let text = format!("{}({}) -> {}", call.name, render_args(&call), obs.output);
                    let item = EvidenceItem { id: format!("obs-{t}"), level: state.current_level, score: 0.0, text };
                    state.push(EvidenceGroup {
                        action: ActionDescriptor::Tool { name: call.name.clone(), args: call.args.clone() },
                        items: vec![item],
                    });
                    rec.observation = Some(obs);
                }
                Action::Retrieve { level, query } => {
                    if level == Level::General {
                        return StopReason::RetrievalExhausted;
                    }
                    let step = self.next_level(state.current_level, level, opts.mode);
                    if step.level == Level::General {
                        return StopReason::RetrievalExhausted;
                    }
                    state.current_level = step.level;
                    let set = self.retrieve(step.level, &query, opts.k, opts.n, opts.mode);
                    rec.level = Some(step.level);
                    rec.query = Some(query.clone());
                    rec.ascend_clamped = step.ascend_clamped;
                    rec.skip_clamped = step.skip_clamped;
                    rec.flags.extend(set.flags.iter().cloned());
                    rec.candidates =
                        set.items.iter().map(|i| CandidateRef { id: i.id.clone(), level: i.level, score: i.score }).collect();
                    let (kept, outcome) = if !opts.filter {
                        (set.items.clone(), FilterOutcome::Disabled)
                    } else if set.is_empty() {
                        (Vec::new(), FilterOutcome::Applied)
                    } else if remaining(ctx) <= 1 {
                        rec.flags.push("filter_skipped_budget".into());
                        (set.items.clone(), FilterOutcome::SkippedBudget)
                    } else {
                        match self.filter_evidence(&state.intent, &query, &set, ctx) {
                            Ok(k) => (k, FilterOutcome::Applied),
                            Err(e) if e.is_budget() => {
                                rec.flags.push("filter_skipped_budget".into());
                                (set.items.clone(), FilterOutcome::SkippedBudget)
                            }
                            Err(e) => {
                                tracing::warn!(error = %e, "filter failed; passing candidates through");
                                extend_flags(run_flags, &[flags::FILTER_FAILED_OPEN.to_string()]);
                                (set.items.clone(), FilterOutcome::FailedOpen)
                            }
                        }
                    };
                    rec.kept = kept.iter().map(|i| i.id.clone()).collect();
                    rec.filter = Some(outcome);
                    state.push(EvidenceGroup { action: ActionDescriptor::Retrieve { level: step.level, query }, items: kept });
                }
            }
            records.push(rec);
        }
        StopReason::IterationCap
    }
}

fn extend_flags(into: &mut Vec<String>, from: &[String]) {
    for f in from {
        if !into.contains(f) {
            into.push(f.clone());
        }
    }
}

fn render_args(call: &ToolCall) -> String {
    call.args.keys().map(|k| format!("{k}={}", tools::arg_string(&call.args, k))).collect::<Vec<_>>().join(", ")
}

/// Parse a summarizer reply outside the engine (used by replayers).
pub fn parse_summary(text: &str) -> Result<SummaryDraft, String> {
    parse_typed(text, &SummaryDraft::schema())
}
