//! Previously solved tickets, searched by summary similarity.

use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use super::{append_jsonl, read_jsonl, TicketError};
use crate::llm::{Embedder, EmbeddingVector, LlmError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolvedTicket {
    pub ticket_id: String,
    pub summary: String,
    pub resolution: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepoMatch {
    pub ticket: SolvedTicket,
    pub similarity: f64,
}

pub struct TicketRepository {
    embedder: Arc<dyn Embedder>,
    items: RwLock<Vec<(SolvedTicket, EmbeddingVector)>>,
    path: Option<PathBuf>,
}

impl TicketRepository {
    pub fn new(embedder: Arc<dyn Embedder>) -> Self {
        Self { embedder, items: RwLock::new(Vec::new()), path: None }
    }

    /// Load `path` if it exists; later additions are appended to it.
    pub fn open(path: &Path, embedder: Arc<dyn Embedder>) -> Result<Self, TicketError> {
        let repo = Self { path: Some(path.to_path_buf()), ..Self::new(embedder) };
        if path.exists() {
            let records: Vec<SolvedTicket> = read_jsonl(path)?;
            repo.load(records)?;
        }
        Ok(repo)
    }

    fn load(&self, records: Vec<SolvedTicket>) -> Result<(), TicketError> {
        if records.is_empty() {
            return Ok(());
        }
        let vecs = records
            .iter()
            .map(|r| self.embedder.embed(&r.summary).map(EmbeddingVector::new))
            .collect::<Result<Vec<_>, _>>()?;
        self.items.write().expect("repo lock poisoned").extend(records.into_iter().zip(vecs));
        Ok(())
    }

    pub fn add(&self, ticket: SolvedTicket) -> Result<(), TicketError> {
        if let Some(p) = &self.path {
            append_jsonl(p, &ticket)?;
        }
        self.load(vec![ticket])
    }

    pub fn extend(&self, tickets: Vec<SolvedTicket>) -> Result<(), TicketError> {
        for t in tickets {
            self.add(t)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.read().expect("repo lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Most similar solved ticket; ties go to the earlier one.
    pub fn best_match(&self, text: &str) -> Result<Option<RepoMatch>, LlmError> {
        let items = self.items.read().expect("repo lock poisoned");
        if items.is_empty() {
            return Ok(None);
        }
        let q = EmbeddingVector::new(self.embedder.embed(text)?);
        let mut best: Option<(usize, f64)> = None;
        for (i, (_, v)) in items.iter().enumerate() {
            let s = q.cosine(v);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        Ok(best.map(|(i, s)| RepoMatch { ticket: items[i].0.clone(), similarity: s }))
    }
}
