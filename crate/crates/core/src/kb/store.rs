//! One knowledge base: entries of a single level, a lexical index and key
//! embeddings.
//!
//! Readers clone an `Arc<Snapshot>` and never block writers for long; a
//! writer builds a complete new snapshot under the write mutex and swaps it
//! in, so every retrieval sees either the old or the new store.
//!
//! On disk a base is `{base_id}.jsonl` (one entry per line) plus
//! `{base_id}.embeddings.jsonl`, a cache of key vectors keyed by entry id,
//! embedder version and a hash of the key text.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::lexical::LexicalIndex;
use super::retrieval::{self, Candidates};
use super::{EvidenceSet, KbError, KnowledgeEntry, Level, Provenance, RetrievalQuery, SopRecord};
use crate::llm::{Embedder, EmbeddingVector, LlmError};
use crate::par::{self, ExecPolicy};

#[derive(Debug, Default)]
pub struct Snapshot {
    pub(crate) entries: Vec<KnowledgeEntry>,
    pub(crate) embeddings: Vec<EmbeddingVector>,
    pub(crate) lexical: LexicalIndex,
    by_id: HashMap<String, usize>,
}

impl Snapshot {
    pub(crate) fn build(pairs: Vec<(KnowledgeEntry, EmbeddingVector)>) -> Self {
        let (entries, embeddings): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let lexical = LexicalIndex::build(entries.iter().map(|e: &KnowledgeEntry| (e.key.as_str(), e.value.as_str())));
        let by_id = entries.iter().enumerate().map(|(i, e)| (e.id.clone(), i)).collect();
        Self { entries, embeddings, lexical, by_id }
    }

    pub fn entries(&self) -> &[KnowledgeEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&KnowledgeEntry> {
        self.by_id.get(id).map(|&i| &self.entries[i])
    }

    pub fn embedding(&self, id: &str) -> Option<&EmbeddingVector> {
        self.by_id.get(id).map(|&i| &self.embeddings[i])
    }

    fn pairs(&self) -> Vec<(KnowledgeEntry, EmbeddingVector)> {
        self.entries.iter().cloned().zip(self.embeddings.iter().cloned()).collect()
    }
}

/// How an SOP enters the store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SopWrite {
    Add,
    Replace { old_id: String },
}

#[derive(Serialize, Deserialize)]
struct CachedVector {
    id: String,
    embedder: String,
    key_sha256: String,
    vector: EmbeddingVector,
}

fn key_hash(key: &str) -> String {
    hex::encode(Sha256::digest(key.as_bytes()))
}

pub struct KnowledgeStore {
    level: Level,
    base_id: String,
    embedder: Arc<dyn Embedder>,
    exec: ExecPolicy,
    dir: Option<PathBuf>,
    snap: RwLock<Arc<Snapshot>>,
    writer: Mutex<()>,
}

impl std::fmt::Debug for KnowledgeStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KnowledgeStore")
            .field("level", &self.level)
            .field("base_id", &self.base_id)
            .field("entries", &self.len())
            .finish()
    }
}

impl KnowledgeStore {
    /// In-memory store.
    pub fn new(level: Level, base_id: impl Into<String>, embedder: Arc<dyn Embedder>) -> Self {
        Self {
            level,
            base_id: base_id.into(),
            embedder,
            exec: ExecPolicy::default(),
            dir: None,
            snap: RwLock::new(Arc::new(Snapshot::default())),
            writer: Mutex::new(()),
        }
    }

    /// File-backed store rooted at `dir`; loads existing files if present.
    pub fn open(dir: &Path, level: Level, base_id: impl Into<String>, embedder: Arc<dyn Embedder>) -> Result<Self, KbError> {
        let mut store = Self::new(level, base_id, embedder);
        fs::create_dir_all(dir).map_err(|source| KbError::Io { path: dir.display().to_string(), source })?;
        store.dir = Some(dir.to_path_buf());
        let entries = store.read_entries()?;
        let cache = store.read_cache();
        let mut stale = false;
        let mut todo = Vec::new();
        let mut vectors: Vec<Option<EmbeddingVector>> = Vec::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            let hit = cache.get(&e.id).filter(|c| {
                c.embedder == store.embedder.version()
                    && c.key_sha256 == key_hash(&e.key)
                    && c.vector.dimension() == store.embedder.dimension()
            });
            match hit {
                Some(c) => vectors.push(Some(c.vector.clone())),
                None => {
                    stale = true;
                    todo.push(i);
                    vectors.push(None);
                }
            }
        }
        let keys: Vec<&str> = todo.iter().map(|&i| entries[i].key.as_str()).collect();
        for (i, v) in todo.iter().zip(store.embed_keys(&keys)?) {
            vectors[*i] = Some(v);
        }
        let pairs = entries.into_iter().zip(vectors.into_iter().map(|v| v.expect("every key embedded"))).collect();
        let snap = Snapshot::build(pairs);
        if stale || cache.len() != snap.entries.len() {
            store.persist(&snap)?;
        }
        *store.snap.write().expect("store lock poisoned") = Arc::new(snap);
        Ok(store)
    }

    pub fn with_exec_policy(mut self, exec: ExecPolicy) -> Self {
        self.exec = exec;
        self
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn base_id(&self) -> &str {
        &self.base_id
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn exec_policy(&self) -> ExecPolicy {
        self.exec
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snap.read().expect("store lock poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.snapshot().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: &str) -> Option<KnowledgeEntry> {
        self.snapshot().get(id).cloned()
    }

    pub fn sop(&self, id: &str) -> Option<SopRecord> {
        self.get(id).and_then(|e| e.sop())
    }

    pub fn list(&self) -> Vec<KnowledgeEntry> {
        self.snapshot().entries.clone()
    }

    fn embed_keys(&self, keys: &[&str]) -> Result<Vec<EmbeddingVector>, KbError> {
        let dim = self.embedder.dimension();
        par::map(self.exec, keys, |k| {
            if k.trim().is_empty() {
                return Err(KbError::EmptyKey);
            }
            let v = self.embedder.embed(k)?;
            if v.len() != dim {
                return Err(LlmError::DimensionMismatch { expected: dim, actual: v.len() }.into());
            }
            Ok(EmbeddingVector::new(v))
        })
        .into_iter()
        .collect()
    }

    fn check(&self, e: &KnowledgeEntry) -> Result<(), KbError> {
        if e.key.trim().is_empty() {
            return Err(KbError::EmptyKey);
        }
        if e.level != self.level {
            return Err(KbError::WrongLevel { base: self.base_id.clone(), expected: self.level, got: e.level });
        }
        if self.level == Level::Sop {
            let record = SopRecord::from_json(&e.value).map_err(|err| KbError::Parse {
                path: e.id.clone(),
                line: 0,
                detail: format!("level-1 value is not an SOP record: {err}"),
            })?;
            record.validate()?;
        }
        Ok(())
    }

    /// Apply `edit` to a copy of the current entries and swap the result in.
    fn mutate<R>(
        &self,
        edit: impl FnOnce(&Snapshot, &mut Vec<(KnowledgeEntry, EmbeddingVector)>) -> Result<R, KbError>,
    ) -> Result<R, KbError> {
        let _w = self.writer.lock().expect("writer lock poisoned");
        let current = self.snapshot();
        let mut pairs = current.pairs();
        let out = edit(&current, &mut pairs)?;
        let next = Snapshot::build(pairs);
        if self.dir.is_some() {
            self.persist(&next)?;
        }
        *self.snap.write().expect("store lock poisoned") = Arc::new(next);
        Ok(out)
    }

    /// Insert new entries; fails without changes if any id already exists.
    pub fn insert_many(&self, entries: Vec<KnowledgeEntry>) -> Result<usize, KbError> {
        for e in &entries {
            self.check(e)?;
        }
        let keys: Vec<&str> = entries.iter().map(|e| e.key.as_str()).collect();
        let vectors = self.embed_keys(&keys)?;
        self.mutate(|snap, pairs| {
            let mut seen = std::collections::HashSet::new();
            for e in &entries {
                if snap.get(&e.id).is_some() || !seen.insert(e.id.clone()) {
                    return Err(KbError::DuplicateId(e.id.clone()));
                }
            }
            let n = entries.len();
            pairs.extend(entries.into_iter().zip(vectors));
            Ok(n)
        })
    }

    pub fn insert(&self, entry: KnowledgeEntry) -> Result<(), KbError> {
        self.insert_many(vec![entry]).map(|_| ())
    }

    /// Insert or overwrite by id.
    pub fn upsert(&self, entry: KnowledgeEntry) -> Result<(), KbError> {
        self.check(&entry)?;
        let v = self.embed_keys(&[entry.key.as_str()])?.remove(0);
        self.mutate(|_, pairs| {
            match pairs.iter_mut().find(|(e, _)| e.id == entry.id) {
                Some(slot) => *slot = (entry, v),
                None => pairs.push((entry, v)),
            }
            Ok(())
        })
    }

    pub fn remove(&self, id: &str) -> Result<KnowledgeEntry, KbError> {
        self.mutate(|_, pairs| {
            let i = pairs.iter().position(|(e, _)| e.id == id).ok_or_else(|| KbError::UnknownEntry(id.to_string()))?;
            Ok(pairs.remove(i).0)
        })
    }

    fn next_id(&self, pairs: &[(KnowledgeEntry, EmbeddingVector)]) -> String {
        let mut seq = pairs.len() + 1;
        loop {
            let id = format!("{}-{seq:04}", self.base_id);
            if !pairs.iter().any(|(e, _)| e.id == id) {
                return id;
            }
            seq += 1;
        }
    }

    /// Add an SOP, or replace an existing one. Replacement removes the old
    /// id, assigns a fresh one and keeps the union of both provenance lists.
    pub fn upsert_sop(&self, record: &SopRecord, mode: SopWrite) -> Result<String, KbError> {
        if self.level != Level::Sop {
            return Err(KbError::WrongLevel { base: self.base_id.clone(), expected: self.level, got: Level::Sop });
        }
        record.validate()?;
        let v = self.embed_keys(&[record.problem_desc.as_str()])?.remove(0);
        self.mutate(|snap, pairs| {
            // allocated before any removal so a replacement never reuses the old id
            let id = self.next_id(pairs);
            let mut record = record.clone();
            if let SopWrite::Replace { old_id } = &mode {
                let old = snap.get(old_id).ok_or_else(|| KbError::UnknownReplaceTarget(old_id.clone()))?;
                let mut prov: Vec<Provenance> = old.provenance.clone();
                if let Some(old_rec) = old.sop() {
                    for p in old_rec.provenance {
                        if !prov.contains(&p) {
                            prov.push(p);
                        }
                    }
                }
                for p in record.provenance.drain(..) {
                    if !prov.contains(&p) {
                        prov.push(p);
                    }
                }
                record.provenance = prov;
                pairs.retain(|(e, _)| &e.id != old_id);
            }
            pairs.push((KnowledgeEntry::from_sop(id.clone(), self.base_id.clone(), &record), v));
            Ok(id)
        })
    }

    /// Embed the query text, degrading to lexical-only on failure.
    pub(crate) fn embed_query(&self, text: &str) -> Option<EmbeddingVector> {
        match self.embedder.embed(text) {
            Ok(v) if v.len() == self.embedder.dimension() => Some(EmbeddingVector::new(v)),
            Ok(_) | Err(_) => None,
        }
    }

    pub fn coarse_retrieve(&self, q: &RetrievalQuery) -> Result<Candidates, KbError> {
        q.validate()?;
        let snap = self.snapshot();
        if snap.entries.is_empty() {
            return Ok(Candidates::default());
        }
        let qv = self.embed_query(&q.text);
        Ok(retrieval::coarse(&[&snap], &q.text, qv.as_ref(), q.n, self.exec))
    }

    pub fn retrieve(&self, q: &RetrievalQuery) -> Result<EvidenceSet, KbError> {
        let cands = self.coarse_retrieve(q)?;
        let lexical_only = cands.lexical_only;
        let mut set = retrieval::select(retrieval::rerank(cands.items), q.k);
        if lexical_only && !self.is_empty() {
            set.flags.push("lexical_only".into());
        }
        Ok(set)
    }

    fn entries_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}.jsonl", self.base_id)))
    }

    fn cache_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}.embeddings.jsonl", self.base_id)))
    }

    fn read_entries(&self) -> Result<Vec<KnowledgeEntry>, KbError> {
        let Some(path) = self.entries_path() else { return Ok(Vec::new()) };
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&path).map_err(|source| KbError::Io { path: path.display().to_string(), source })?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| KbError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    detail: e.to_string(),
                })
            })
            .collect()
    }

    fn read_cache(&self) -> HashMap<String, CachedVector> {
        let Some(path) = self.cache_path() else { return HashMap::new() };
        let Ok(text) = fs::read_to_string(&path) else { return HashMap::new() };
        text.lines()
            .filter_map(|l| serde_json::from_str::<CachedVector>(l).ok())
            .map(|c| (c.id.clone(), c))
            .collect()
    }

    fn persist(&self, snap: &Snapshot) -> Result<(), KbError> {
        let (Some(entries_path), Some(cache_path)) = (self.entries_path(), self.cache_path()) else {
            return Ok(());
        };
        let mut lines = String::new();
        for e in &snap.entries {
            lines.push_str(&serde_json::to_string(e).expect("entries serialize"));
            lines.push('\n');
        }
        write_atomic(&entries_path, &lines)?;
        let mut cache = String::new();
        for (e, v) in snap.entries.iter().zip(&snap.embeddings) {
            let rec = CachedVector {
                id: e.id.clone(),
                embedder: self.embedder.version().to_string(),
                key_sha256: key_hash(&e.key),
                vector: v.clone(),
            };
            cache.push_str(&serde_json::to_string(&rec).expect("vectors serialize"));
            cache.push('\n');
        }
        write_atomic(&cache_path, &cache)
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), KbError> {
    let io = |source| KbError::Io { path: path.display().to_string(), source };
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(contents.as_bytes()).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::sop::{InvestigationStep, Observation, Outcome, ResolutionStep, RootCauseBranch};
    use crate::llm::HashingEmbedder;

    fn embedder() -> Arc<dyn Embedder> {
        Arc::new(HashingEmbedder::new(128))
    }

    pub(crate) fn sop(desc: &str, cause: &str) -> SopRecord {
        SopRecord {
            problem_desc: desc.into(),
            content: vec![RootCauseBranch {
                root_cause: cause.into(),
                investigation_steps: vec![InvestigationStep {
                    step: 1,
                    target: "logs".into(),
                    action: "inspect".into(),
                    observations: vec![Observation { condition: "seen".into(), outcome: Outcome::Confirmed }],
                }],
                resolution_steps: vec![ResolutionStep { step: 1, action: "fix".into() }],
            }],
            provenance: vec![],
        }
    }

    #[test]
    fn empty_store_gives_nothing() {
        let s = KnowledgeStore::new(Level::Internal, "kb", embedder());
        let q = RetrievalQuery::new("anything", Level::Internal);
        assert!(s.coarse_retrieve(&q).unwrap().items.is_empty());
        assert!(s.retrieve(&q).unwrap().is_empty());
    }

    #[test]
    fn n_beyond_size_returns_everything() {
        let s = KnowledgeStore::new(Level::Internal, "kb", embedder());
        let entries = (0..10)
            .map(|i| KnowledgeEntry::new(format!("d{i}"), Level::Internal, "kb", format!("topic {i}"), "body"))
            .collect();
        s.insert_many(entries).unwrap();
        let c = s.coarse_retrieve(&RetrievalQuery::new("unrelated words", Level::Internal).with_n(50)).unwrap();
        assert_eq!(c.items.len(), 10);
    }

    #[test]
    fn add_then_lookup_by_problem_desc() {
        let s = KnowledgeStore::new(Level::Sop, "sop", embedder());
        let id = s.upsert_sop(&sop("Disk quota exceeded on warehouse volume", "quota"), SopWrite::Add).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(id, "sop-0001");
        let e = s.retrieve(&RetrievalQuery::new("Disk quota exceeded on warehouse volume", Level::Sop)).unwrap();
        assert_eq!(e.items[0].id, id);
    }

    #[test]
    fn zero_branch_record_rejected() {
        let s = KnowledgeStore::new(Level::Sop, "sop", embedder());
        let mut r = sop("x", "y");
        r.content.clear();
        let err = s.upsert_sop(&r, SopWrite::Add).unwrap_err();
        assert!(matches!(err, KbError::ValidationFailed(_)));
        assert!(s.is_empty());
    }

    #[test]
    fn replace_unknown_target_rejected() {
        let s = KnowledgeStore::new(Level::Sop, "sop", embedder());
        let err = s.upsert_sop(&sop("x", "y"), SopWrite::Replace { old_id: "nope".into() }).unwrap_err();
        assert!(matches!(err, KbError::UnknownReplaceTarget(_)));
    }

    #[test]
    fn replace_keeps_provenance_union() {
        let s = KnowledgeStore::new(Level::Sop, "sop", embedder());
        let mut a = sop("error A", "cause");
        a.provenance = vec![Provenance::Manual];
        let old = s.upsert_sop(&a, SopWrite::Add).unwrap();
        let mut b = sop("error A merged", "cause");
        b.provenance = vec![Provenance::Distilled { ticket_id: "T9".into() }];
        let new = s.upsert_sop(&b, SopWrite::Replace { old_id: old.clone() }).unwrap();
        assert_ne!(old, new);
        assert!(s.get(&old).is_none());
        let rec = s.sop(&new).unwrap();
        assert_eq!(rec.provenance, vec![Provenance::Manual, Provenance::Distilled { ticket_id: "T9".into() }]);
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn duplicate_ids_rejected_atomically() {
        let s = KnowledgeStore::new(Level::Internal, "kb", embedder());
        s.insert(KnowledgeEntry::new("a", Level::Internal, "kb", "k", "v")).unwrap();
        let err = s
            .insert_many(vec![
                KnowledgeEntry::new("b", Level::Internal, "kb", "k", "v"),
                KnowledgeEntry::new("a", Level::Internal, "kb", "k", "v"),
            ])
            .unwrap_err();
        assert!(matches!(err, KbError::DuplicateId(_)));
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn persisted_store_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let s = KnowledgeStore::open(dir.path(), Level::Internal, "kb", embedder()).unwrap();
        let entries = (0..30)
            .map(|i| KnowledgeEntry::new(format!("d{i:02}"), Level::Internal, "kb", format!("error code E{i} in stage {}", i % 4), format!("fix number {i}")))
            .collect();
        s.insert_many(entries).unwrap();
        let queries = ["error code E7", "stage 2", "fix number 13"];
        let before: Vec<_> = queries.iter().map(|q| s.retrieve(&RetrievalQuery::new(*q, Level::Internal)).unwrap()).collect();
        drop(s);
        let again = KnowledgeStore::open(dir.path(), Level::Internal, "kb", embedder()).unwrap();
        let after: Vec<_> = queries.iter().map(|q| again.retrieve(&RetrievalQuery::new(*q, Level::Internal)).unwrap()).collect();
        assert_eq!(before, after);
        // a different embedder version invalidates the cache and re-embeds
        let other = KnowledgeStore::open(dir.path(), Level::Internal, "kb", Arc::new(HashingEmbedder::new(64))).unwrap();
        assert_eq!(other.snapshot().embeddings[0].dimension(), 64);
    }

    #[test]
    fn readers_see_whole_snapshots() {
        let s = Arc::new(KnowledgeStore::new(Level::Internal, "kb", embedder()));
        let writer = {
            let s = s.clone();
            std::thread::spawn(move || {
                for i in 0..20 {
                    let batch = (0..5)
                        .map(|j| KnowledgeEntry::new(format!("d{i}-{j}"), Level::Internal, "kb", format!("k {i} {j}"), "v"))
                        .collect();
                    s.insert_many(batch).unwrap();
                }
            })
        };
        for _ in 0..200 {
            let snap = s.snapshot();
            assert_eq!(snap.entries.len() % 5, 0);
            assert_eq!(snap.entries.len(), snap.embeddings.len());
            assert_eq!(snap.entries.len(), snap.lexical.len());
        }
        writer.join().unwrap();
        assert_eq!(s.len(), 100);
    }
}
