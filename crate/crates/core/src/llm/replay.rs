//! Deterministic providers for tests, fixtures and offline benchmarks.
//!
//! * [`ScriptedProvider`] answers from an ordered rule list matched against
//!   the prompt text. Scenarios are authored this way.
//! * [`RecordingProvider`] wraps any provider and captures a [`Transcript`].
//! * [`ReplayProvider`] serves a transcript by fingerprint and nothing else.
//!
//! A fingerprint is `sha256(tag + "\n" + canonical prompt)` in hex. The
//! canonical prompt renders each message as `role: content` on its own
//! line after (1) replacing RFC 3339 / ISO-8601 timestamps with `<ts>`,
//! (2) replacing UUIDs with `<uuid>`, (3) replacing the value following
//! `session_id` / `session-id` / `request_id` with `<id>`, and
//! (4) collapsing every whitespace run to one space and trimming.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ChatProvider, ChatRequest, LlmError, Message, ProviderReply};
use crate::text::collapse_whitespace;

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("duplicate fingerprint {0}")]
    DuplicateFingerprint(String),
    #[error("invalid rule pattern `{pattern}`: {source}")]
    Pattern { pattern: String, source: regex::Error },
}

fn volatile_patterns() -> &'static [(Regex, &'static str)] {
    static PATTERNS: OnceLock<Vec<(Regex, &'static str)>> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        vec![
            (
                Regex::new(r"\d{4}-\d{2}-\d{2}[T ]\d{2}:\d{2}:\d{2}(\.\d+)?(Z|[+-]\d{2}:?\d{2})?").unwrap(),
                "<ts>",
            ),
            (
                Regex::new(r"[0-9a-fA-F]{8}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{12}").unwrap(),
                "<uuid>",
            ),
            (Regex::new(r"(?i)\b(session[_-]?id|request[_-]?id)(\s*[:=]\s*)\S+").unwrap(), "${1}${2}<id>"),
        ]
    })
}

pub fn canonicalize(messages: &[Message]) -> String {
    messages
        .iter()
        .map(|m| {
            let mut content = m.content.clone();
            for (re, rep) in volatile_patterns() {
                content = re.replace_all(&content, *rep).into_owned();
            }
            format!("{}: {}", m.role, collapse_whitespace(&content))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn fingerprint(tag: &str, messages: &[Message]) -> String {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update(b"\n");
    h.update(canonicalize(messages).as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub fingerprint: String,
    pub canned_response: String,
}

/// A list of canned responses with unique fingerprints, stored one JSON
/// record per line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn new(entries: Vec<TranscriptEntry>) -> Result<Self, TranscriptError> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.fingerprint.as_str()) {
                return Err(TranscriptError::DuplicateFingerprint(e.fingerprint.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self, TranscriptError> {
        let file = fs::File::open(path).map_err(|source| TranscriptError::Io { path: path.display().to_string(), source })?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| TranscriptError::Io { path: path.display().to_string(), source })?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|source| TranscriptError::Parse { line: i + 1, source })?);
        }
        Self::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<(), TranscriptError> {
        let io = |source| TranscriptError::Io { path: path.display().to_string(), source };
        let mut f = fs::File::create(path).map_err(io)?;
        for e in &self.entries {
            let line = serde_json::to_string(e).expect("transcript entry serializes");
            writeln!(f, "{line}").map_err(|source| TranscriptError::Io { path: path.display().to_string(), source })?;
        }
        Ok(())
    }
}

/// Serves canned responses by fingerprint. A miss is reported as
/// `ProviderUnavailable` so callers degrade exactly as they would on an
/// outage.
pub struct ReplayProvider {
    id: String,
    responses: HashMap<String, String>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl ReplayProvider {
    pub fn new(id: impl Into<String>, transcript: Transcript) -> Self {
        let responses = transcript.entries.into_iter().map(|e| (e.fingerprint, e.canned_response)).collect();
        Self { id: id.into(), responses, hits: AtomicUsize::new(0), misses: AtomicUsize::new(0) }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }
}

impl ChatProvider for ReplayProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ProviderReply, LlmError> {
        let fp = fingerprint(&request.tag, &request.messages);
        match self.responses.get(&fp) {
            Some(text) => {
                self.hits.fetch_add(1, Ordering::SeqCst);
                Ok(ProviderReply { text: text.clone(), usage: None })
            }
            None => {
                self.misses.fetch_add(1, Ordering::SeqCst);
                Err(LlmError::ProviderUnavailable(format!(
                    "no transcript entry for tag `{}` fingerprint {fp}",
                    request.tag
                )))
            }
        }
    }
}

/// One scripted answer. A rule matches when the request tag equals `tag`
/// (if set), every `contains` substring occurs in the prompt text, no
/// `absent` substring occurs, and `pattern` (if set) matches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub absent: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    pub respond: String,
}

impl ScriptRule {
    pub fn respond(text: impl Into<String>) -> Self {
        Self { tag: None, contains: Vec::new(), absent: Vec::new(), pattern: None, respond: text.into() }
    }

    pub fn for_tag(tag: &str, respond: impl Into<String>) -> Self {
        Self { tag: Some(tag.to_string()), ..Self::respond(respond) }
    }

    pub fn when(mut self, needle: impl Into<String>) -> Self {
        self.contains.push(needle.into());
        self
    }

    pub fn unless(mut self, needle: impl Into<String>) -> Self {
        self.absent.push(needle.into());
        self
    }

    pub fn matching(mut self, pattern: impl Into<String>) -> Self {
        self.pattern = Some(pattern.into());
        self
    }
}

/// Ordered rule list; the first matching rule answers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub rules: Vec<ScriptRule>,
}

impl Script {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        Self { rules }
    }

    pub fn extend(&mut self, other: Script) {
        self.rules.extend(other.rules);
    }

    pub fn load(path: &Path) -> Result<Self, TranscriptError> {
        let text = fs::read_to_string(path).map_err(|source| TranscriptError::Io { path: path.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|source| TranscriptError::Parse { line: 0, source })
    }
}

pub struct ScriptedProvider {
    id: String,
    rules: Vec<(ScriptRule, Option<Regex>)>,
    calls: AtomicUsize,
}

impl ScriptedProvider {
    pub fn new(id: impl Into<String>, script: Script) -> Result<Self, TranscriptError> {
        let rules = script
            .rules
            .into_iter()
            .map(|r| {
                let re = match &r.pattern {
                    Some(p) => Some(Regex::new(p).map_err(|source| TranscriptError::Pattern { pattern: p.clone(), source })?),
                    None => None,
                };
                Ok((r, re))
            })
            .collect::<Result<Vec<_>, TranscriptError>>()?;
        Ok(Self { id: id.into(), rules, calls: AtomicUsize::new(0) })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatProvider for ScriptedProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ProviderReply, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let prompt = request.prompt_text();
        let hit = self.rules.iter().find(|(rule, re)| {
            rule.tag.as_deref().is_none_or(|t| t == request.tag)
                && rule.contains.iter().all(|n| prompt.contains(n.as_str()))
                && !rule.absent.iter().any(|n| prompt.contains(n.as_str()))
                && re.as_ref().is_none_or(|re| re.is_match(&prompt))
        });
        match hit {
            Some((rule, _)) => Ok(ProviderReply { text: rule.respond.clone(), usage: None }),
            None => Err(LlmError::ProviderUnavailable(format!("no scripted rule for tag `{}`", request.tag))),
        }
    }
}

/// Captures every successful exchange of the wrapped provider.
pub struct RecordingProvider {
    inner: Arc<dyn ChatProvider>,
    recorded: Mutex<Vec<TranscriptEntry>>,
}

impl RecordingProvider {
    pub fn new(inner: Arc<dyn ChatProvider>) -> Self {
        Self { inner, recorded: Mutex::new(Vec::new()) }
    }

    /// Recorded entries, first response per fingerprint.
    pub fn transcript(&self) -> Transcript {
        let recorded = self.recorded.lock().expect("recorder poisoned");
        let mut seen = std::collections::HashSet::new();
        let entries = recorded.iter().filter(|e| seen.insert(e.fingerprint.clone())).cloned().collect();
        Transcript { entries }
    }
}

impl ChatProvider for RecordingProvider {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ProviderReply, LlmError> {
        let reply = self.inner.complete(request)?;
        self.recorded.lock().expect("recorder poisoned").push(TranscriptEntry {
            fingerprint: fingerprint(&request.tag, &request.messages),
            canned_response: reply.text.clone(),
        });
        Ok(reply)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_ignores_volatile_fields_and_spacing() {
        let a = vec![Message::user("created 2025-09-01T10:00:00Z session_id=abc123\n\n  job   failed")];
        let b = vec![Message::user("created 2026-01-13 08:30:59 session_id=zzz job failed")];
        assert_eq!(fingerprint("planner", &a), fingerprint("planner", &b));
        assert_ne!(fingerprint("planner", &a), fingerprint("filter", &a));
        let c = vec![Message::user("created 2025-09-01T10:00:00Z session_id=abc123 job succeeded")];
        assert_ne!(fingerprint("planner", &a), fingerprint("planner", &c));
    }

    #[test]
    fn canonical_form_is_documented_shape() {
        let m = vec![Message::system("  a\tb "), Message::user("x")];
        assert_eq!(canonicalize(&m), "system: a b\nuser: x");
    }

    #[test]
    fn transcript_rejects_duplicates_and_round_trips() {
        let e = TranscriptEntry { fingerprint: "f".into(), canned_response: "r".into() };
        assert!(matches!(
            Transcript::new(vec![e.clone(), e.clone()]),
            Err(TranscriptError::DuplicateFingerprint(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let t = Transcript::new(vec![e]).unwrap();
        t.save(&path).unwrap();
        assert_eq!(Transcript::load(&path).unwrap(), t);
    }

    #[test]
    fn hand_written_transcript_file_replays() {
        let msgs = vec![Message::user("hello")];
        let fp = fingerprint("classifier", &msgs);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenario.jsonl");
        std::fs::write(&path, format!("{{\"fingerprint\":\"{fp}\",\"canned_response\":\"{{\\\"actionable\\\":false}}\"}}\n")).unwrap();
        let p = ReplayProvider::new("r", Transcript::load(&path).unwrap());
        let reply = p.complete(&ChatRequest::new("classifier", msgs)).unwrap();
        assert_eq!(reply.text, "{\"actionable\":false}");
        assert!(p.complete(&ChatRequest::new("classifier", vec![Message::user("other")])).is_err());
        assert_eq!((p.hits(), p.misses()), (1, 1));
    }

    #[test]
    fn scripted_rules_first_match_wins() {
        let script = Script::new(vec![
            ScriptRule::for_tag("planner", "ready").when("[sop-1]"),
            ScriptRule::for_tag("planner", "retrieve").unless("[sop-1]"),
            ScriptRule::for_tag("filter", "kept").matching(r"candidates:\s+\[sop-\d\]"),
        ]);
        let p = ScriptedProvider::new("s", script).unwrap();
        let ask = |tag: &str, text: &str| p.complete(&ChatRequest::new(tag, vec![Message::user(text)])).map(|r| r.text);
        assert_eq!(ask("planner", "evidence: [sop-1]").unwrap(), "ready");
        assert_eq!(ask("planner", "evidence: none").unwrap(), "retrieve");
        assert_eq!(ask("filter", "candidates: [sop-2]").unwrap(), "kept");
        assert!(ask("summarizer", "x").is_err());
    }

    #[test]
    fn recording_then_replay_is_identical() {
        let script = Script::new(vec![ScriptRule::respond("A").when("one"), ScriptRule::respond("B")]);
        let rec = RecordingProvider::new(Arc::new(ScriptedProvider::new("s", script).unwrap()));
        let r1 = rec.complete(&ChatRequest::new("t", vec![Message::user("one")])).unwrap();
        let r2 = rec.complete(&ChatRequest::new("t", vec![Message::user("two")])).unwrap();
        let replay = ReplayProvider::new("r", rec.transcript());
        assert_eq!(replay.complete(&ChatRequest::new("t", vec![Message::user("one")])).unwrap(), r1);
        assert_eq!(replay.complete(&ChatRequest::new("t", vec![Message::user("two")])).unwrap(), r2);
    }
}
