use std::collections::BTreeSet;
use std::sync::{Arc, RwLock};

use super::retrieval::{self, Candidates};
use super::store::Snapshot;
use super::web::{web_search, WebSearchProvider};
use super::{EvidenceSet, KbError, KnowledgeEntry, KnowledgeStore, Level, Provenance, RetrievalQuery};
use crate::llm::EmbeddingVector;

pub const DEFAULT_WEB_MIN_CHARS: usize = 40;

/// The four levels: one SOP store, any number of internal bases, an
/// optional web provider, and the storageless model-knowledge level.
pub struct KnowledgeHierarchy {
    sop: Arc<KnowledgeStore>,
    internal: Vec<Arc<KnowledgeStore>>,
    web: Option<Arc<dyn WebSearchProvider>>,
    web_min_chars: usize,
    disabled: RwLock<BTreeSet<Level>>,
}

impl KnowledgeHierarchy {
    pub fn new(sop: Arc<KnowledgeStore>, internal: Vec<Arc<KnowledgeStore>>) -> Self {
        Self { sop, internal, web: None, web_min_chars: DEFAULT_WEB_MIN_CHARS, disabled: RwLock::new(BTreeSet::new()) }
    }

    pub fn with_web(mut self, provider: Arc<dyn WebSearchProvider>) -> Self {
        self.web = Some(provider);
        self
    }

    pub fn with_web_min_chars(mut self, min_chars: usize) -> Self {
        self.web_min_chars = min_chars;
        self
    }

    pub fn sop_store(&self) -> &Arc<KnowledgeStore> {
        &self.sop
    }

    pub fn internal_stores(&self) -> &[Arc<KnowledgeStore>] {
        &self.internal
    }

    pub fn stores(&self) -> Vec<&Arc<KnowledgeStore>> {
        std::iter::once(&self.sop).chain(self.internal.iter()).collect()
    }

    pub fn store(&self, base_id: &str) -> Option<&Arc<KnowledgeStore>> {
        self.stores().into_iter().find(|s| s.base_id() == base_id)
    }

    /// Find an entry in any base.
    pub fn entry(&self, id: &str) -> Option<KnowledgeEntry> {
        self.stores().into_iter().find_map(|s| s.get(id))
    }

    pub fn web_provider(&self) -> Option<&Arc<dyn WebSearchProvider>> {
        self.web.as_ref()
    }

    /// Enable or disable a retrievable level. Level 4 cannot be toggled.
    pub fn set_level_enabled(&self, level: Level, enabled: bool) -> Result<(), KbError> {
        if level == Level::General {
            return Err(KbError::InvalidQuery("level 4 cannot be disabled".into()));
        }
        let mut d = self.disabled.write().expect("level lock poisoned");
        if enabled {
            d.remove(&level);
        } else {
            d.insert(level);
        }
        Ok(())
    }

    pub fn is_enabled(&self, level: Level) -> bool {
        match level {
            Level::General => true,
            Level::Web if self.web.is_none() => false,
            Level::Internal if self.internal.is_empty() => false,
            l => !self.disabled.read().expect("level lock poisoned").contains(&l),
        }
    }

    /// Enabled retrievable levels, top-down.
    pub fn enabled_levels(&self) -> Vec<Level> {
        Level::RETRIEVABLE.into_iter().filter(|l| self.is_enabled(*l)).collect()
    }

    pub fn disabled_levels(&self) -> Vec<Level> {
        self.disabled.read().expect("level lock poisoned").iter().copied().collect()
    }

    /// First enabled level at or below `from`; `General` if none remain.
    pub fn first_enabled_from(&self, from: Level) -> Level {
        Level::ALL.into_iter().filter(|l| *l >= from).find(|l| self.is_enabled(*l)).unwrap_or(Level::General)
    }

    fn embed_query(&self, text: &str) -> Option<EmbeddingVector> {
        self.sop.embed_query(text)
    }

    fn pooled(&self, stores: &[&Arc<KnowledgeStore>], q: &RetrievalQuery) -> Result<EvidenceSet, KbError> {
        q.validate()?;
        let snaps: Vec<Arc<Snapshot>> = stores.iter().map(|s| s.snapshot()).collect();
        if snaps.iter().all(|s| s.entries().is_empty()) {
            return Ok(EvidenceSet::default());
        }
        let refs: Vec<&Snapshot> = snaps.iter().map(|s| s.as_ref()).collect();
        let qv = self.embed_query(&q.text);
        let cands: Candidates = retrieval::coarse(&refs, &q.text, qv.as_ref(), q.n, self.sop.exec_policy());
        let mut set = retrieval::select(retrieval::rerank(cands.items), q.k);
        if cands.lexical_only {
            set.flags.push("lexical_only".into());
        }
        Ok(set)
    }

    /// Retrieve from one level.
    pub fn retrieve(&self, q: &RetrievalQuery) -> Result<EvidenceSet, KbError> {
        if q.level == Level::General {
            return Err(KbError::Level4Requested);
        }
        if q.level != Level::Web && !self.is_enabled(q.level) {
            return Err(KbError::LevelDisabled(q.level));
        }
        match q.level {
            Level::Sop => self.pooled(&[&self.sop], q),
            Level::Internal => match &q.base {
                Some(b) => {
                    let store = self.internal.iter().find(|s| s.base_id() == b).ok_or_else(|| KbError::UnknownBase(b.clone()))?;
                    self.pooled(&[store], q)
                }
                None => self.pooled(&self.internal.iter().collect::<Vec<_>>(), q),
            },
            Level::Web => self.retrieve_web(q),
            Level::General => unreachable!("handled above"),
        }
    }

    /// Levels 1 and 2 pooled into one collection (disabled levels left out).
    pub fn retrieve_flat(&self, q: &RetrievalQuery) -> Result<EvidenceSet, KbError> {
        let mut stores: Vec<&Arc<KnowledgeStore>> = Vec::new();
        if self.is_enabled(Level::Sop) {
            stores.push(&self.sop);
        }
        if self.is_enabled(Level::Internal) {
            stores.extend(self.internal.iter());
        }
        self.pooled(&stores, q)
    }

    fn retrieve_web(&self, q: &RetrievalQuery) -> Result<EvidenceSet, KbError> {
        q.validate()?;
        if self.disabled.read().expect("level lock poisoned").contains(&Level::Web) {
            return Err(KbError::LevelDisabled(Level::Web));
        }
        let Some(provider) = &self.web else {
            return Ok(EvidenceSet { items: Vec::new(), flags: vec!["web_unavailable".into()] });
        };
        let results = web_search(provider.as_ref(), &q.text, q.n, self.web_min_chars);
        if results.unavailable {
            return Ok(EvidenceSet { items: Vec::new(), flags: vec!["web_unavailable".into()] });
        }
        let temp = KnowledgeStore::new(Level::Web, "web", self.sop.embedder().clone()).with_exec_policy(self.sop.exec_policy());
        let mut seen = BTreeSet::new();
        let entries: Vec<KnowledgeEntry> = results
            .pages
            .into_iter()
            .filter(|p| seen.insert(p.url.clone()))
            .map(|p| KnowledgeEntry {
                id: p.url.clone(),
                level: Level::Web,
                base_id: "web".into(),
                key: p.text,
                value: String::new(),
                provenance: vec![Provenance::Web { url: p.url }],
            })
            .collect();
        if entries.is_empty() {
            return Ok(EvidenceSet::default());
        }
        temp.insert_many(entries)?;
        temp.retrieve(q)
    }
}
