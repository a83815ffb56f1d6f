//! Bulk loading from a documents directory. One file per entry; the file
//! stem is the entry id. For level 1 the file is an SOP record in JSON; for
//! other levels the first line is the key and the rest is the value.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{KbError, KnowledgeEntry, KnowledgeStore, Level, Provenance, SopRecord};

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub added: usize,
    pub failures: Vec<IngestFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestFailure {
    pub file: String,
    pub reason: String,
}

fn parse_file(path: &Path, level: Level, base_id: &str) -> Result<KnowledgeEntry, String> {
    let id = path.file_stem().and_then(|s| s.to_str()).ok_or("file name is not valid UTF-8")?.to_string();
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    if level == Level::Sop {
        let mut record = SopRecord::from_json(&text).map_err(|e| format!("not an SOP record: {e}"))?;
        record.validate().map_err(|v| v.to_string())?;
        if record.provenance.is_empty() {
            record.provenance.push(Provenance::Manual);
        }
        return Ok(KnowledgeEntry::from_sop(id, base_id, &record));
    }
    let (key, value) = text.split_once('\n').unwrap_or((text.as_str(), ""));
    if key.trim().is_empty() {
        return Err("first line (the key) is empty".into());
    }
    Ok(KnowledgeEntry::new(id, level, base_id, key.trim(), value.trim()))
}

/// Parse every regular file under `dir` (sorted by name) and insert the
/// good ones in one batch. Bad files are reported and skipped.
pub fn ingest_dir(store: &KnowledgeStore, dir: &Path) -> Result<IngestReport, KbError> {
    let io = |source| KbError::Io { path: dir.display().to_string(), source };
    let mut files: Vec<PathBuf> = fs::read_dir(dir).map_err(io)?.filter_map(Result::ok).map(|e| e.path()).filter(|p| p.is_file()).collect();
    files.sort();
    let mut report = IngestReport::default();
    let mut entries = Vec::new();
    for path in files {
        match parse_file(&path, store.level(), store.base_id()) {
            Ok(e) if store.get(&e.id).is_some() || entries.iter().any(|x: &KnowledgeEntry| x.id == e.id) => {
                report.failures.push(IngestFailure { file: path.display().to_string(), reason: format!("duplicate id `{}`", e.id) });
            }
            Ok(e) => entries.push(e),
            Err(reason) => {
                tracing::warn!(file = %path.display(), %reason, "skipping file");
                report.failures.push(IngestFailure { file: path.display().to_string(), reason });
            }
        }
    }
    report.added = store.insert_many(entries)?;
    Ok(report)
}
