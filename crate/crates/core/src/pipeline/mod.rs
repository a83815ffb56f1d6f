//! The five-stage request workflow: classify, clarify and route, quick
//! answer, plan and act, summarize.

pub mod clarify;
pub mod route;
pub mod session;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use route::{AgentRegistry, AgentSpec, RouteTarget, RoutingDecision};
pub use session::{Channel, ReplyKind, Role, Session, SessionTurn};

use crate::config::{ClarificationConfig, Config, SearchConfig, Thresholds};
use crate::deepsearch::{flags, DeepSearch, FinalAnswer, RetrievalMode, RunOptions, RunOutput, Trace};
use crate::intent::{IntentRecord, RequestType};
use crate::llm::{Budget, ChatRequest, FieldKind, FieldSpec, LlmError, Message, RequestContext, SchemaDescriptor};
use crate::tickets::TicketRepository;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("message is empty")]
    EmptyMessage,
    #[error("structured context is missing required fields: {}", missing.join(", "))]
    SchemaValidation { missing: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: u8,
    pub name: String,
    pub outcome: String,
}

/// What happened to one request before and around the engine run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub channel: Channel,
    pub stages: Vec<StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<IntentRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<RoutingDecision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deepsearch: Option<Trace>,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl PipelineTrace {
    pub fn new(channel: Channel) -> Self {
        Self { channel, stages: Vec::new(), intent: None, routing: None, deepsearch: None, flags: Vec::new() }
    }

    fn stage(&mut self, stage: u8, name: &str, outcome: impl Into<String>) {
        self.stages.push(StageRecord { stage, name: name.to_string(), outcome: outcome.into() });
    }

    fn flag(&mut self, f: &str) {
        if !self.flags.iter().any(|x| x == f) {
            self.flags.push(f.to_string());
        }
    }

    pub fn stage_numbers(&self) -> Vec<u8> {
        self.stages.iter().map(|s| s.stage).collect()
    }

    /// The stored form: compact JSON with credentials redacted.
    pub fn payload(&self) -> String {
        let mut v = serde_json::to_value(self).expect("trace serializes");
        crate::text::redact_value(&mut v);
        v.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum Reply {
    Answer { answer: FinalAnswer },
    FollowUp { field: String, question: String },
    Refusal { text: String },
}

impl Reply {
    pub fn kind(&self) -> ReplyKind {
        match self {
            Reply::Answer { .. } => ReplyKind::Answer,
            Reply::FollowUp { .. } => ReplyKind::FollowUp,
            Reply::Refusal { .. } => ReplyKind::Refusal,
        }
    }

    pub fn text(&self) -> &str {
        match self {
            Reply::Answer { answer } => &answer.text,
            Reply::FollowUp { question, .. } => question,
            Reply::Refusal { text } => text,
        }
    }

    pub fn answer(&self) -> Option<&FinalAnswer> {
        match self {
            Reply::Answer { answer } => Some(answer),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnOutcome {
    pub reply: Reply,
    pub trace: PipelineTrace,
}

pub enum Clarification {
    Clarified(IntentRecord),
    FollowUp { field: String, question: String },
}

/// Thresholds and limits the pipeline reads from configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSettings {
    pub thresholds: Thresholds,
    pub search: SearchConfig,
    pub budget: Budget,
    pub clarification: ClarificationConfig,
}

impl From<&Config> for PipelineSettings {
    fn from(c: &Config) -> Self {
        Self {
            thresholds: c.thresholds.clone(),
            search: c.search.clone(),
            budget: c.budget.budget(),
            clarification: c.clarification.clone(),
        }
    }
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self::from(&Config::default())
    }
}

#[derive(Debug, Deserialize)]
struct ClassifierReply {
    actionable: bool,
}

#[derive(Debug, Deserialize)]
struct SimplicityReply {
    simple: bool,
    #[serde(default)]
    answer: String,
}

pub struct Pipeline {
    engine: Arc<DeepSearch>,
    agents: AgentRegistry,
    repo: Option<Arc<TicketRepository>>,
    settings: PipelineSettings,
}

impl Pipeline {
    pub fn new(engine: Arc<DeepSearch>, agents: AgentRegistry, settings: PipelineSettings) -> Self {
        Self { engine, agents, repo: None, settings }
    }

    pub fn with_ticket_repository(mut self, repo: Arc<TicketRepository>) -> Self {
        self.repo = Some(repo);
        self
    }

    pub fn engine(&self) -> &Arc<DeepSearch> {
        &self.engine
    }

    pub fn agents(&self) -> &AgentRegistry {
        &self.agents
    }

    pub fn settings(&self) -> &PipelineSettings {
        &self.settings
    }

    fn stage_context(&self) -> RequestContext {
        RequestContext::new(self.settings.budget)
    }

    /// Stage 1. A malformed classifier reply counts as actionable; the
    /// second value reports that degradation.
    pub fn classify(&self, text: &str, ctx: &mut RequestContext) -> Result<(bool, bool), LlmError> {
        let schema = SchemaDescriptor::new("intent_class", vec![FieldSpec::required("actionable", FieldKind::Bool)]);
        let prompt = format!(
            "Decide whether this message is an actionable request about the data platform (a question about a \
             feature or a problem to troubleshoot) or chit-chat and off-topic talk.\n\n# Message\n{}\n\n\
             Reply with one JSON object: {{\"actionable\": true | false}}",
            text.trim()
        );
        let req = ChatRequest::new("classifier", vec![Message::user(prompt)]);
        match self.engine.gateway().chat_structured::<ClassifierReply>(&req, &schema, ctx) {
            Ok(r) => Ok((r.actionable, false)),
            Err(LlmError::MalformedOutput { .. }) => Ok((true, true)),
            Err(e) => Err(e),
        }
    }

    /// Stage 2: fill fields from this message and session memory; ask one
    /// follow-up while required fields are missing and the cap allows.
    pub fn clarify(
        &self,
        session: &mut Session,
        text: &str,
        ctx: &mut RequestContext,
        trace: &mut PipelineTrace,
    ) -> Result<Clarification, LlmError> {
        let cfg = &self.settings.clarification;
        session.request_messages.push(clarify::normalize_input(text));
        let (rt, clarified, fields, keywords) =
            match clarify::call_clarifier(self.engine.gateway(), cfg, &session.memory, &session.request_messages, ctx) {
                Ok(r) => {
                    let fields = clarify::reply_fields(&r);
                    let text = if r.clarified_text.trim().is_empty() {
                        session.request_messages.join("\n")
                    } else {
                        r.clarified_text.trim().to_string()
                    };
                    (r.request_type, text, fields, r.keywords)
                }
                Err(LlmError::MalformedOutput { .. }) => {
                    trace.flag("clarifier_degraded");
                    let joined = session.request_messages.join("\n");
                    let (rt, fields) = clarify::heuristic_fields(&joined);
                    let text = fields.get("symptom").or(fields.get("topic")).cloned().unwrap_or_else(|| joined.clone());
                    (rt, text, fields, Vec::new())
                }
                Err(e) => {
                    // a failed turn does not count as part of the request
                    session.request_messages.pop();
                    return Err(e);
                }
            };
        session.remember(&fields);
        let mut intent = clarify::assemble(cfg, rt, clarified, session.memory.clone(), keywords);
        if !intent.missing_fields.is_empty() {
            if session.follow_ups < cfg.max_follow_ups {
                let missing = clarify::missing_groups(&clarify::required_groups(cfg, rt), &session.memory);
                if let Some((field, question)) = clarify::follow_up_question(cfg, &missing, &session.asked) {
                    session.follow_ups += 1;
                    session.asked.push(field.clone());
                    session.pending = Some(intent);
                    return Ok(Clarification::FollowUp { field, question });
                }
            }
            intent.incomplete = true;
        }
        session.finish_request();
        Ok(Clarification::Clarified(intent))
    }

    pub fn route(&self, intent: &IntentRecord) -> RoutingDecision {
        route::route(intent, &self.agents, self.engine.gateway(), self.settings.thresholds.route)
    }

    /// Stage 3: a solved ticket above the similarity threshold, else a
    /// direct answer if the request is judged simple, else `None`.
    pub fn quick_answer(&self, intent: &IntentRecord, ctx: &mut RequestContext) -> Option<FinalAnswer> {
        let missing_tag = &self.engine.templates().missing_information;
        if let Some(repo) = &self.repo {
            match repo.best_match(&intent.clarified_text) {
                Ok(Some(m)) if m.similarity >= self.settings.thresholds.quick_answer => {
                    let mut a = FinalAnswer {
                        request_type: Some(intent.request_type),
                        explanation: format!("This matches the previously solved ticket {}: {}", m.ticket.ticket_id, m.ticket.summary),
                        resolution_steps: vec![m.ticket.resolution.clone()],
                        citations: vec![m.ticket.ticket_id.clone()],
                        ..Default::default()
                    };
                    a.flag(flags::QUICK_ANSWER);
                    a.render(missing_tag);
                    return Some(a);
                }
                Ok(_) => {}
                Err(e) => tracing::warn!(error = %e, "ticket repository lookup failed"),
            }
        }
        let schema = SchemaDescriptor::new(
            "simplicity",
            vec![FieldSpec::required("simple", FieldKind::Bool), FieldSpec::optional("answer", FieldKind::String)],
        );
        let prompt = format!(
            "Is this request simple enough to answer correctly and completely without consulting any documentation, \
             logs or tools? If so, answer it.\n\n# Request\n{}\nReply with one JSON object: \
             {{\"simple\": true | false, \"answer\": \"<the answer when simple>\"}}",
            intent.render()
        );
        let req = ChatRequest::new("simplicity", vec![Message::user(prompt)]);
        match self.engine.gateway().chat_structured::<SimplicityReply>(&req, &schema, ctx) {
            Ok(r) if r.simple && !r.answer.trim().is_empty() && intent.is_complete() => {
                let mut a = FinalAnswer { request_type: Some(intent.request_type), explanation: r.answer.trim().to_string(), ..Default::default() };
                a.flag(flags::DIRECT_ANSWER);
                a.render(missing_tag);
                Some(a)
            }
            Ok(_) => None,
            Err(e) => {
                tracing::debug!(error = %e, "simplicity probe unavailable");
                None
            }
        }
    }

    /// Stage 4 on the general path: the loop over a flat collection.
    pub fn plan_and_act(&self, intent: &IntentRecord) -> RunOutput {
        let opts = RunOptions::full(&self.settings.search, self.settings.budget).with_mode(RetrievalMode::Flat);
        self.engine.run(intent, &opts)
    }

    /// The specialized path: the hierarchical loop with filtering.
    pub fn run_specialized(&self, intent: &IntentRecord) -> RunOutput {
        self.engine.run(intent, &RunOptions::full(&self.settings.search, self.settings.budget))
    }

    /// Route a clarified intent and produce the answer (stages 2 to 5).
    /// Chat turns, console diagnoses and the full benchmark all end here.
    pub fn execute(&self, intent: &IntentRecord, trace: &mut PipelineTrace) -> FinalAnswer {
        let decision = self.route(intent);
        let outcome = match decision.agent() {
            Some(a) => format!("specialized:{a} ({:.3})", decision.best_similarity),
            None if decision.fallback => "general (embedding failed)".to_string(),
            None => format!("general ({:.3})", decision.best_similarity),
        };
        trace.stage(2, "route", outcome);
        if decision.fallback {
            trace.flag("routing_fallback");
        }
        trace.intent = Some(intent.clone());
        let specialized = decision.agent().is_some();
        trace.routing = Some(decision);

        let out = if specialized {
            self.run_specialized(intent)
        } else {
            let mut ctx = self.stage_context();
            if let Some(a) = self.quick_answer(intent, &mut ctx) {
                let how = if a.has_flag(flags::QUICK_ANSWER) { "solved_ticket" } else { "direct" };
                trace.stage(3, "quick_answer", how);
                trace.stage(5, "summarize", how);
                return a;
            }
            trace.stage(3, "quick_answer", "none");
            self.plan_and_act(intent)
        };
        let mode = if specialized { "hierarchical" } else { "flat" };
        trace.stage(4, "plan_and_act", format!("{mode}, {} iterations", out.trace.iterations.len()));
        trace.stage(5, "summarize", format!("{:?}", out.trace.stop_reason).to_lowercase());
        trace.deepsearch = Some(out.trace);
        out.answer
    }

    fn safe_answer(&self, rt: Option<RequestType>, flag: &str) -> FinalAnswer {
        let mut a = FinalAnswer::safe_response(rt, &self.engine.templates().safe_response);
        a.flag(flag);
        a.render(&self.engine.templates().missing_information);
        a
    }

    /// Drive one chat turn.
    pub fn handle_message(&self, session: &mut Session, text: &str) -> Result<TurnOutcome, PipelineError> {
        if text.trim().is_empty() {
            return Err(PipelineError::EmptyMessage);
        }
        session.turns.push(SessionTurn { role: Role::User, text: text.to_string(), kind: None, answer: None, request_id: None });
        let mut trace = PipelineTrace::new(session.channel);
        let mut ctx = self.stage_context();
        let reply = self.chat_turn(session, text, &mut ctx, &mut trace);
        session.turns.push(SessionTurn {
            role: Role::Assistant,
            text: reply.text().to_string(),
            kind: Some(reply.kind()),
            answer: reply.answer().cloned(),
            request_id: None,
        });
        Ok(TurnOutcome { reply, trace })
    }

    fn chat_turn(&self, session: &mut Session, text: &str, ctx: &mut RequestContext, trace: &mut PipelineTrace) -> Reply {
        if session.awaiting_follow_up() {
            trace.stage(1, "classify", "skipped: follow-up reply");
        } else {
            match self.classify(text, ctx) {
                Ok((true, degraded)) => {
                    if degraded {
                        trace.flag("classifier_degraded");
                    }
                    trace.stage(1, "classify", "actionable");
                }
                Ok((false, _)) => {
                    trace.stage(1, "classify", "non_actionable");
                    return Reply::Refusal { text: self.engine.templates().refusal.clone() };
                }
                Err(e) => {
                    tracing::warn!(error = %e, "classifier failed");
                    trace.stage(1, "classify", "error");
                    trace.flag("error");
                    return Reply::Answer { answer: self.safe_answer(None, flags::PROVIDER_ERROR) };
                }
            }
        }
        match self.clarify(session, text, ctx, trace) {
            Ok(Clarification::FollowUp { field, question }) => {
                trace.stage(2, "clarify", format!("follow_up:{field}"));
                trace.intent = session.pending.clone();
                Reply::FollowUp { field, question }
            }
            Ok(Clarification::Clarified(intent)) => {
                trace.stage(2, "clarify", if intent.incomplete { "incomplete" } else { "complete" });
                Reply::Answer { answer: self.execute(&intent, trace) }
            }
            Err(e) => {
                tracing::warn!(error = %e, "clarifier failed");
                trace.stage(2, "clarify", "error");
                trace.flag("error");
                Reply::Answer { answer: self.safe_answer(None, flags::PROVIDER_ERROR) }
            }
        }
    }

    /// Intent from console context. The console contract requires every
    /// configured field; a missing one is a validation error.
    pub fn console_intent(&self, text: Option<&str>, context: &BTreeMap<String, String>) -> Result<IntentRecord, PipelineError> {
        let missing: Vec<String> = self
            .settings
            .clarification
            .console_required
            .iter()
            .filter(|f| context.get(*f).is_none_or(|v| v.trim().is_empty()))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(PipelineError::SchemaValidation { missing });
        }
        Ok(self.context_intent(text, context))
    }

    /// Intent from text plus optional context, without the console check.
    /// Fields still missing are reported and the intent marked incomplete.
    pub fn context_intent(&self, text: Option<&str>, context: &BTreeMap<String, String>) -> IntentRecord {
        let mut fields: BTreeMap<String, String> = context
            .iter()
            .filter(|(k, v)| !matches!(k.as_str(), "request_type" | "keywords") && !v.trim().is_empty())
            .map(|(k, v)| (k.clone(), clarify::normalize_input(v)))
            .collect();
        let rt = match context.get("request_type").map(|s| s.trim()) {
            Some("consultation") => RequestType::Consultation,
            _ => RequestType::Troubleshooting,
        };
        let text = text.map(str::trim).filter(|t| !t.is_empty());
        if rt == RequestType::Troubleshooting && !fields.contains_key("symptom") {
            let symptom = text.map(str::to_string).or_else(|| fields.get("error_log").and_then(|l| clarify::first_error_line(l)));
            if let Some(s) = symptom {
                fields.insert("symptom".into(), s);
            }
        }
        if rt == RequestType::Consultation && !fields.contains_key("topic") {
            if let Some(t) = text {
                fields.insert("topic".into(), t.to_string());
            }
        }
        let key = if rt == RequestType::Troubleshooting { "symptom" } else { "topic" };
        let clarified = text.map(str::to_string).or_else(|| fields.get(key).cloned()).unwrap_or_default();
        let keywords = context
            .get("keywords")
            .map(|k| k.split(',').map(str::trim).filter(|k| !k.is_empty()).map(str::to_string).collect())
            .unwrap_or_default();
        let mut intent = clarify::assemble(&self.settings.clarification, rt, clarified, fields, keywords);
        intent.incomplete = !intent.missing_fields.is_empty();
        intent
    }

    /// Console diagnosis: no classification or clarification.
    pub fn diagnose(&self, text: Option<&str>, context: &BTreeMap<String, String>) -> Result<TurnOutcome, PipelineError> {
        let intent = self.console_intent(text, context)?;
        let mut trace = PipelineTrace::new(Channel::Console);
        trace.stage(1, "classify", "skipped: console");
        trace.stage(2, "clarify", "skipped: structured context");
        let answer = self.execute(&intent, &mut trace);
        Ok(TurnOutcome { reply: Reply::Answer { answer }, trace })
    }
}
