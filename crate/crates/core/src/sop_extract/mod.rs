//! Distilling validated SOPs from resolved tickets: screening, repeated
//! drafting with a stability review, and curated integration.

pub mod merge;
pub mod queue;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use merge::{consolidate, merge_records, BranchMatch};
pub use queue::{EscalationKind, EscalationQueue, EscalationRecord};

use crate::kb::{KbError, KnowledgeStore, Level, Provenance, RetrievalQuery, SopRecord, SopWrite};
use crate::llm::{ChatRequest, FieldKind, FieldSpec, LlmGateway, Message, RequestContext, SchemaDescriptor};
use crate::tickets::{Ticket, TicketError, TicketLabels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreenReason {
    UnresolvedCoreIssue,
    TemporaryWorkaroundKnownBug,
    Intermittent,
    Valid,
    /// The screener reply was unusable; treated as invalid.
    ScreeningFailed,
}

impl ScreenReason {
    pub fn name(self) -> &'static str {
        match self {
            ScreenReason::UnresolvedCoreIssue => "unresolved_core_issue",
            ScreenReason::TemporaryWorkaroundKnownBug => "temporary_workaround_known_bug",
            ScreenReason::Intermittent => "intermittent",
            ScreenReason::Valid => "valid",
            ScreenReason::ScreeningFailed => "screening_failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningVerdict {
    pub is_valid: bool,
    pub reason: ScreenReason,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SopDraft {
    pub candidate: SopRecord,
    pub source_ticket_id: String,
    pub run_index: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewResult {
    pub stability_score: usize,
    pub accepted: bool,
    /// Run indices of the drafts grouped by agreeing root cause.
    pub groups: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_run: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen: Option<SopRecord>,
    pub escalated: bool,
    #[serde(default)]
    pub analysis: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchAction {
    ConsolidatedSteps,
    AddedBranch,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MergeOutcome {
    Merged { existing_id: String, merged: SopRecord, branch_action: BranchAction },
    Distinct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mutation {
    Added { id: String },
    Replaced { old_id: String, new_id: String },
    None { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationStep {
    pub existing_id: String,
    pub merged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_action: Option<BranchAction>,
}

/// What one ticket did to the store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub ticket_id: String,
    pub verdict: ScreeningVerdict,
    pub drafts: Vec<SopDraft>,
    /// Runs that produced no usable draft, with the reason.
    pub failed_runs: Vec<(usize, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review: Option<ReviewResult>,
    pub curation: Vec<CurationStep>,
    pub mutation: Mutation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractionParams {
    pub runs: usize,
    pub stability_threshold: usize,
    pub similar: usize,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        Self { runs: 3, stability_threshold: 2, similar: 3 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error("ticket {0} has no content")]
    EmptyTicket(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Queue(#[from] TicketError),
}

const SOP_FORMAT: &str = r#"Reply with one SOP JSON object:
{"problem_desc": "<key error codes or descriptions>",
 "content": [{"root_cause": "<root cause>",
   "investigation_steps": [{"step": "1", "target": "<what to inspect>", "action": "<how>",
     "observations": [{"condition": "<what you see>", "outcome": "confirmed" | "goto <step>"}]}],
   "resolution_steps": [{"step": "1", "action": "<fix>"}]}]}"#;

fn sop_schema() -> SchemaDescriptor {
    SchemaDescriptor::new(
        "sop",
        vec![FieldSpec::required("problem_desc", FieldKind::String), FieldSpec::required("content", FieldKind::Array)],
    )
}

fn context_block(ticket: &Ticket, labels: Option<&TicketLabels>) -> String {
    let mut out = String::new();
    if let Some(l) = labels {
        out.push_str(&format!("system: {}\nmodule: {}\n", l.system, l.module));
    }
    out.push_str(&format!("# Ticket {}\n{}", ticket.id, ticket.render()));
    out
}

/// The SOP-extraction stages, all through one gateway.
pub struct SopExtractor<'a> {
    gateway: &'a LlmGateway,
    params: ExtractionParams,
}

impl<'a> SopExtractor<'a> {
    pub fn new(gateway: &'a LlmGateway, params: ExtractionParams) -> Self {
        Self { gateway, params }
    }

    /// Binary validity audit. Unusable replies count as invalid.
    pub fn screen(&self, ticket: &Ticket, labels: Option<&TicketLabels>, ctx: &mut RequestContext) -> ScreeningVerdict {
        #[derive(Deserialize)]
        struct Raw {
            is_valid: bool,
            reason: ScreenReason,
            #[serde(default)]
            notes: String,
        }
        let schema = SchemaDescriptor::new(
            "screening",
            vec![
                FieldSpec::required("is_valid", FieldKind::Bool),
                FieldSpec::one_of("reason", &["unresolved_core_issue", "temporary_workaround_known_bug", "intermittent", "valid"]),
                FieldSpec::optional("notes", FieldKind::String),
            ],
        );
        let prompt = format!(
            "Audit this resolved ticket before it is turned into an SOP. It is invalid if the core issue is still \
             unresolved, if it was only bypassed with a temporary workaround for a known bug, or if the problem is \
             intermittent.\n\n{}\n\nReply with one JSON object: {{\"is_valid\": true|false, \"reason\": \
             \"unresolved_core_issue\" | \"temporary_workaround_known_bug\" | \"intermittent\" | \"valid\", \"notes\": \"...\"}}",
            context_block(ticket, labels)
        );
        let req = ChatRequest::new("screener", vec![Message::user(prompt)]);
        match self.gateway.chat_structured::<Raw>(&req, &schema, ctx) {
            Ok(r) if r.is_valid == (r.reason == ScreenReason::Valid) => {
                ScreeningVerdict { is_valid: r.is_valid, reason: r.reason, notes: r.notes }
            }
            Ok(r) => ScreeningVerdict {
                is_valid: false,
                reason: ScreenReason::ScreeningFailed,
                notes: format!("inconsistent verdict: is_valid={} with reason {:?}", r.is_valid, r.reason),
            },
            Err(e) => ScreeningVerdict { is_valid: false, reason: ScreenReason::ScreeningFailed, notes: e.to_string() },
        }
    }

    /// `Err((true, _))` is a reply that parsed but broke an SOP rule.
    fn sop_call(&self, tag: &str, prompt: String, ctx: &mut RequestContext) -> Result<SopRecord, (bool, String)> {
        let req = ChatRequest::new(tag, vec![Message::user(prompt)]);
        let rec: SopRecord = self.gateway.chat_structured(&req, &sop_schema(), ctx).map_err(|e| (false, e.to_string()))?;
        rec.validate().map_err(|v| (true, format!("{}: {v}", v.rule())))?;
        Ok(rec)
    }

    /// One drafting run.
    pub fn author(
        &self,
        ticket: &Ticket,
        labels: Option<&TicketLabels>,
        run_index: usize,
        ctx: &mut RequestContext,
    ) -> Result<SopDraft, String> {
        let prompt = format!(
            "Extract the diagnostic logic from this ticket as a structured SOP (draft {run_index} of {}). The draft may \
             contain several candidate root causes, one branch each.\n\n{}\n\n{SOP_FORMAT}",
            self.params.runs,
            context_block(ticket, labels)
        );
        let mut candidate = self.sop_call("author", prompt, ctx).map_err(|(_, e)| e)?;
        candidate.provenance = vec![Provenance::Distilled { ticket_id: ticket.id.clone() }];
        Ok(SopDraft { candidate, source_ticket_id: ticket.id.clone(), run_index, flags: Vec::new() })
    }

    /// Revise a draft against the conversation. Failures keep the input.
    pub fn edit(&self, ticket: &Ticket, labels: Option<&TicketLabels>, draft: SopDraft, ctx: &mut RequestContext) -> SopDraft {
        let prompt = format!(
            "Revise this SOP draft (draft {} of {}) against the original conversation: remove redundant branches, \
             clarify ambiguous steps and keep only the most defensible root cause.\n\n{}\n\n# Draft\n{}\n\n{SOP_FORMAT}",
            draft.run_index,
            self.params.runs,
            context_block(ticket, labels),
            draft.candidate.to_json_pretty()
        );
        match self.sop_call("editor", prompt, ctx) {
            Ok(mut rec) => {
                rec.provenance = draft.candidate.provenance.clone();
                SopDraft { candidate: rec, ..draft }
            }
            Err((broke_rule, e)) => {
                tracing::info!(ticket = %draft.source_ticket_id, run = draft.run_index, error = %e, "edit discarded");
                let mut d = draft;
                d.flags.push(if broke_rule { "edit_rejected" } else { "editor_failed" }.into());
                d
            }
        }
    }

    /// Group drafts by agreeing root cause and accept the largest group if
    /// it reaches the threshold.
    pub fn review(&self, drafts: &[SopDraft], ctx: &mut RequestContext) -> ReviewResult {
        let threshold = self.params.stability_threshold;
        let escalated = |analysis: String| ReviewResult {
            stability_score: 0,
            accepted: false,
            groups: Vec::new(),
            chosen_run: None,
            chosen: None,
            escalated: true,
            analysis,
        };
        if drafts.is_empty() {
            return escalated("no usable drafts".into());
        }
        #[derive(Deserialize)]
        struct Raw {
            #[serde(default)]
            analysis: String,
            groups: Vec<Vec<Value>>,
            #[serde(default)]
            selected: Option<Value>,
        }
        let schema = SchemaDescriptor::new(
            "review",
            vec![
                FieldSpec::optional("analysis", FieldKind::String),
                FieldSpec::required("groups", FieldKind::Array),
                FieldSpec::optional("selected", FieldKind::Any),
            ],
        );
        let listing: Vec<String> = drafts
            .iter()
            .enumerate()
            .map(|(i, d)| format!("## SOP {}\n{}", i + 1, d.candidate.to_json_pretty()))
            .collect();
        let prompt = format!(
            "These SOP candidates were generated independently from the same ticket. Compare their root causes and \
             group the candidates whose root causes are semantically identical, then select the best final SOP.\n\n{}\n\n\
             Reply with one JSON object: {{\"analysis\": \"...\", \"groups\": [[<SOP numbers>], ...], \"selected\": <SOP number>}}",
            listing.join("\n\n")
        );
        let req = ChatRequest::new("reviewer", vec![Message::user(prompt)]);
        let raw: Raw = match self.gateway.chat_structured(&req, &schema, ctx) {
            Ok(r) => r,
            Err(e) => return escalated(format!("review failed: {e}")),
        };
        let n = drafts.len();
        let as_index = |v: &Value| -> Option<usize> {
            let i = match v {
                Value::Number(x) => x.as_u64()? as usize,
                Value::String(s) => s.trim().trim_start_matches(|c: char| !c.is_ascii_digit()).parse().ok()?,
                _ => return None,
            };
            (1..=n).contains(&i).then_some(i)
        };
        // a partition of 1..=n: repeats dropped, missing drafts become singletons
        let mut seen = BTreeSet::new();
        let mut groups: Vec<Vec<usize>> = raw
            .groups
            .iter()
            .map(|g| g.iter().filter_map(as_index).filter(|i| seen.insert(*i)).collect::<Vec<_>>())
            .filter(|g| !g.is_empty())
            .collect();
        for i in 1..=n {
            if !seen.contains(&i) {
                groups.push(vec![i]);
            }
        }
        let best = groups.iter().map(Vec::len).max().unwrap_or(0);
        let largest = groups.iter().find(|g| g.len() == best).cloned().unwrap_or_default();
        let accepted = best >= threshold;
        let pick = raw.selected.as_ref().and_then(as_index).filter(|i| largest.contains(i)).or(largest.first().copied());
        let run_of = |i: usize| drafts[i - 1].run_index;
        ReviewResult {
            stability_score: best,
            accepted,
            groups: groups.iter().map(|g| g.iter().map(|&i| run_of(i)).collect()).collect(),
            chosen_run: pick.filter(|_| accepted).map(run_of),
            chosen: pick.filter(|_| accepted).map(|i| drafts[i - 1].candidate.clone()),
            escalated: !accepted,
            analysis: raw.analysis,
        }
    }

    /// Decide whether `new` belongs with `existing` and build the merge.
    pub fn curate(&self, existing_id: &str, existing: &SopRecord, new: &SopRecord, ctx: &mut RequestContext) -> MergeOutcome {
        #[derive(Deserialize)]
        struct Raw {
            same_symptom: bool,
            #[serde(default)]
            problem_desc: Option<String>,
            #[serde(default)]
            branch_matches: Vec<Value>,
            #[serde(default)]
            merged_root_causes: Vec<Option<String>>,
        }
        let schema = SchemaDescriptor::new(
            "curation",
            vec![
                FieldSpec::required("same_symptom", FieldKind::Bool),
                FieldSpec::optional("problem_desc", FieldKind::String),
                FieldSpec::optional("branch_matches", FieldKind::Array),
                FieldSpec::optional("merged_root_causes", FieldKind::Array),
            ],
        );
        let prompt = format!(
            "Decide whether the new SOP describes the same symptom family as the existing one. If so, combine their \
             problem descriptions into one richer symptom signature and, for each branch of the new SOP, name the \
             existing branch with the same root cause (or null if it is a different root cause).\n\n# Existing SOP\n{}\n\n\
             # New SOP\n{}\n\nReply with one JSON object: {{\"same_symptom\": true|false, \"problem_desc\": \"...\", \
             \"branch_matches\": [<existing branch number or null, one per new branch>], \"merged_root_causes\": \
             [<merged root-cause text or null, one per new branch>]}}",
            existing.to_json_pretty(),
            new.to_json_pretty()
        );
        let req = ChatRequest::new("curator", vec![Message::user(prompt)]);
        let raw: Raw = match self.gateway.chat_structured(&req, &schema, ctx) {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(error = %e, existing = existing_id, "curation failed; keeping entries distinct");
                return MergeOutcome::Distinct;
            }
        };
        if !raw.same_symptom {
            return MergeOutcome::Distinct;
        }
        let matches: Vec<BranchMatch> = (0..new.content.len())
            .map(|i| match raw.branch_matches.get(i).and_then(Value::as_u64) {
                Some(j) if j >= 1 && (j as usize) <= existing.content.len() => BranchMatch::Existing(j as usize - 1),
                _ => BranchMatch::New,
            })
            .collect();
        let desc = raw.problem_desc.filter(|d| !d.trim().is_empty()).unwrap_or_else(|| new.problem_desc.clone());
        let merged = merge_records(existing, new, &desc, &matches, &raw.merged_root_causes);
        if merged.validate().is_err() || merged.content.len() < existing.content.len() {
            return MergeOutcome::Distinct;
        }
        let branch_action = if matches.contains(&BranchMatch::New) {
            BranchAction::AddedBranch
        } else if matches.is_empty() {
            BranchAction::None
        } else {
            BranchAction::ConsolidatedSteps
        };
        MergeOutcome::Merged { existing_id: existing_id.to_string(), merged, branch_action }
    }

    /// Screen, draft N times, review, then merge into or add to `store`.
    /// The store is changed at most once.
    pub fn extract_and_integrate(
        &self,
        ticket: &Ticket,
        labels: Option<&TicketLabels>,
        store: &KnowledgeStore,
        queue: &EscalationQueue,
        ctx: &mut RequestContext,
    ) -> Result<DeltaReport, ExtractError> {
        if ticket.is_empty() {
            return Err(ExtractError::EmptyTicket(ticket.id.clone()));
        }
        let verdict = self.screen(ticket, labels, ctx);
        let mut report = DeltaReport {
            ticket_id: ticket.id.clone(),
            verdict: verdict.clone(),
            drafts: Vec::new(),
            failed_runs: Vec::new(),
            review: None,
            curation: Vec::new(),
            mutation: Mutation::None { reason: String::new() },
        };
        if !verdict.is_valid {
            report.mutation = Mutation::None { reason: format!("screened invalid: {}", verdict.reason.name()) };
            return Ok(report);
        }
        for run in 1..=self.params.runs {
            match self.author(ticket, labels, run, ctx) {
                Ok(d) => report.drafts.push(self.edit(ticket, labels, d, ctx)),
                Err(e) => report.failed_runs.push((run, e)),
            }
        }
        let review = self.review(&report.drafts, ctx);
        report.review = Some(review.clone());
        let Some(chosen) = review.chosen.clone().filter(|_| review.accepted) else {
            queue.push(&EscalationRecord {
                kind: EscalationKind::SopReview,
                ticket_id: ticket.id.clone(),
                drafts: report.drafts.iter().map(|d| d.candidate.clone()).collect(),
                stability_score: Some(review.stability_score),
                reason: format!(
                    "stability score {} below threshold {}",
                    review.stability_score, self.params.stability_threshold
                ),
            })?;
            report.mutation = Mutation::None { reason: "escalated for expert review".into() };
            return Ok(report);
        };
        let similar = if store.is_empty() {
            Vec::new()
        } else {
            store.retrieve(&RetrievalQuery::new(chosen.problem_desc.clone(), Level::Sop).with_k(self.params.similar))?.items
        };
        for item in similar {
            let Some(existing) = store.sop(&item.id) else { continue };
            match self.curate(&item.id, &existing, &chosen, ctx) {
                MergeOutcome::Merged { existing_id, merged, branch_action } => {
                    report.curation.push(CurationStep { existing_id: existing_id.clone(), merged: true, branch_action: Some(branch_action) });
                    let new_id = store.upsert_sop(&merged, SopWrite::Replace { old_id: existing_id.clone() })?;
                    report.mutation = Mutation::Replaced { old_id: existing_id, new_id };
                    return Ok(report);
                }
                MergeOutcome::Distinct => {
                    report.curation.push(CurationStep { existing_id: item.id.clone(), merged: false, branch_action: None })
                }
            }
        }
        let id = store.upsert_sop(&chosen, SopWrite::Add)?;
        report.mutation = Mutation::Added { id };
        Ok(report)
    }
}
