//! Deterministic assembly of a merged SOP from the curator's judgments.

use crate::kb::{InvestigationStep, Outcome, ResolutionStep, RootCauseBranch, SopRecord};

fn norm(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Fold `new` into `existing`: investigation and resolution steps of `new`
/// not already present are appended, with goto targets remapped.
pub fn consolidate(existing: &RootCauseBranch, new: &RootCauseBranch, root_cause: Option<&str>) -> RootCauseBranch {
    let mut out = existing.clone();
    if let Some(rc) = root_cause.filter(|r| !r.trim().is_empty()) {
        out.root_cause = rc.to_string();
    }
    let key = |s: &InvestigationStep| (norm(&s.target), norm(&s.action));
    // new step number -> position (1-based) in the merged list
    let mut map: Vec<(u32, u32)> = Vec::new();
    let mut appended: Vec<InvestigationStep> = Vec::new();
    for s in &new.investigation_steps {
        if let Some(pos) = out.investigation_steps.iter().position(|e| key(e) == key(s)) {
            map.push((s.step, pos as u32 + 1));
        } else {
            let pos = out.investigation_steps.len() + appended.len() + 1;
            map.push((s.step, pos as u32));
            appended.push(s.clone());
        }
    }
    for mut s in appended {
        for o in &mut s.observations {
            if let Outcome::Goto(t) = o.outcome {
                if let Some((_, to)) = map.iter().find(|(from, _)| *from == t) {
                    o.outcome = Outcome::Goto(*to);
                }
            }
        }
        out.investigation_steps.push(s);
    }
    for r in &new.resolution_steps {
        if !out.resolution_steps.iter().any(|e| norm(&e.action) == norm(&r.action)) {
            out.resolution_steps.push(ResolutionStep { step: 0, action: r.action.clone() });
        }
    }
    // steps are numbered by position
    for (i, s) in out.investigation_steps.iter_mut().enumerate() {
        s.step = i as u32 + 1;
    }
    for (i, s) in out.resolution_steps.iter_mut().enumerate() {
        s.step = i as u32 + 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchMatch {
    /// Same root cause as the existing branch with this 0-based index.
    Existing(usize),
    New,
}

/// Build the merged record: one branch per new branch (consolidated with
/// its match, or added), then the existing branches nothing matched.
pub fn merge_records(
    existing: &SopRecord,
    new: &SopRecord,
    problem_desc: &str,
    matches: &[BranchMatch],
    merged_root_causes: &[Option<String>],
) -> SopRecord {
    let mut content = Vec::new();
    let mut used = vec![false; existing.content.len()];
    for (i, nb) in new.content.iter().enumerate() {
        match matches.get(i).copied().unwrap_or(BranchMatch::New) {
            BranchMatch::Existing(j) if j < existing.content.len() && !used[j] => {
                used[j] = true;
                let rc = merged_root_causes.get(i).and_then(|r| r.as_deref());
                content.push(consolidate(&existing.content[j], nb, rc));
            }
            _ => content.push(nb.clone()),
        }
    }
    for (j, eb) in existing.content.iter().enumerate() {
        if !used[j] {
            content.push(eb.clone());
        }
    }
    let mut provenance = existing.provenance.clone();
    for p in &new.provenance {
        if !provenance.contains(p) {
            provenance.push(p.clone());
        }
    }
    SopRecord { problem_desc: problem_desc.to_string(), content, provenance }
}
