use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::store::Snapshot;
use super::{EvidenceItem, EvidenceSet, Level};
use crate::llm::EmbeddingVector;
use crate::par::{self, ExecPolicy};

/// Reciprocal-rank fusion constant.
pub const RRF_K: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub level: Level,
    pub base_id: String,
    pub text: String,
    pub lexical_score: f64,
    pub cosine: f64,
    /// 1-based position in the lexical top-N, if present there.
    pub lexical_rank: Option<usize>,
    /// 1-based position in the embedding top-N, if present there.
    pub semantic_rank: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Candidates {
    pub items: Vec<Candidate>,
    /// Query embedding failed; only the lexical side contributed.
    pub lexical_only: bool,
}

fn by_score_then_id(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

/// Union of the lexical top-`n` and the cosine top-`n` over all snapshots.
/// Scores from different snapshots are ranked together.
pub(crate) fn coarse(
    snaps: &[&Snapshot],
    text: &str,
    query_vec: Option<&EmbeddingVector>,
    n: usize,
    exec: ExecPolicy,
) -> Candidates {
    let mut lexical: Vec<(f64, &str, usize, usize)> = Vec::new();
    let mut semantic: Vec<(f64, &str, usize, usize)> = Vec::new();
    for (si, snap) in snaps.iter().enumerate() {
        for (doc, score) in snap.lexical.scores(text).into_iter().enumerate() {
            if score > 0.0 {
                lexical.push((score, snap.entries[doc].id.as_str(), si, doc));
            }
        }
        if let Some(q) = query_vec {
            let cos = par::map(exec, &snap.embeddings, |e| e.cosine(q));
            for (doc, c) in cos.into_iter().enumerate() {
                semantic.push((c, snap.entries[doc].id.as_str(), si, doc));
            }
        }
    }
    lexical.sort_by(|a, b| by_score_then_id(&(a.0, a.1), &(b.0, b.1)));
    semantic.sort_by(|a, b| by_score_then_id(&(a.0, a.1), &(b.0, b.1)));
    lexical.truncate(n);
    semantic.truncate(n);

    let cosine_of = |si: usize, doc: usize| query_vec.map(|q| snaps[si].embeddings[doc].cosine(q)).unwrap_or(0.0);
    let mut items: Vec<Candidate> = Vec::new();
    let mut pos: HashMap<String, usize> = HashMap::new();
    let mut add = |si: usize, doc: usize, lex: Option<usize>, sem: Option<usize>, lex_score: f64| {
        let e = &snaps[si].entries[doc];
        if let Some(&i) = pos.get(&e.id) {
            let c: &mut Candidate = &mut items[i];
            c.lexical_rank = c.lexical_rank.or(lex);
            c.semantic_rank = c.semantic_rank.or(sem);
            return;
        }
        pos.insert(e.id.clone(), items.len());
        items.push(Candidate {
            id: e.id.clone(),
            level: e.level,
            base_id: e.base_id.clone(),
            text: e.display_text(),
            lexical_score: lex_score,
            cosine: cosine_of(si, doc),
            lexical_rank: lex,
            semantic_rank: sem,
        });
    };
    for (rank, (score, _, si, doc)) in lexical.iter().enumerate() {
        add(*si, *doc, Some(rank + 1), None, *score);
    }
    for (rank, (_, _, si, doc)) in semantic.iter().enumerate() {
        add(*si, *doc, None, Some(rank + 1), 0.0);
    }
    Candidates { items, lexical_only: query_vec.is_none() }
}

/// Fused RRF score; a missing rank counts as `worst`.
pub fn fused_score(c: &Candidate, worst: usize) -> f64 {
    let l = c.lexical_rank.unwrap_or(worst) as f64;
    let s = c.semantic_rank.unwrap_or(worst) as f64;
    1.0 / (RRF_K + l) + 1.0 / (RRF_K + s)
}

/// Order candidates by fused score, ties by id ascending. A missing rank is
/// treated as one past the last candidate.
pub fn rerank(candidates: Vec<Candidate>) -> Vec<(Candidate, f64)> {
    let worst = candidates.len() + 1;
    let mut scored: Vec<(Candidate, f64)> = candidates
        .into_iter()
        .map(|c| {
            let s = fused_score(&c, worst);
            (c, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.id.cmp(&b.0.id)));
    scored
}

/// Top-k with duplicate ids removed (first occurrence kept).
pub fn select(ranked: Vec<(Candidate, f64)>, k: usize) -> EvidenceSet {
    let mut seen = std::collections::HashSet::new();
    let items = ranked
        .into_iter()
        .filter(|(c, _)| seen.insert(c.id.clone()))
        .take(k)
        .map(|(c, score)| EvidenceItem { id: c.id, level: c.level, score, text: c.text })
        .collect();
    EvidenceSet { items, flags: Vec::new() }
}
