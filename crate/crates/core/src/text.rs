//! Small text utilities shared by the lexical index, the hashing embedder
//! and the input normalizers.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;

/// Lowercased alphanumeric tokens. Underscores and dots inside a token are
/// kept so that identifiers like `java.lang.NumberFormatException` and
/// `last_modified_time` survive as single tokens; the dotted form is also
/// split into its parts.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '.')) {
        let tok = raw.trim_matches('.');
        if tok.is_empty() {
            continue;
        }
        let lower = tok.to_lowercase();
        if lower.contains('.') {
            for part in lower.split('.').filter(|p| !p.is_empty()) {
                out.push(part.to_string());
            }
        }
        out.push(lower);
    }
    out
}

/// Collapse every whitespace run to one space and trim.
pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Truncate to at most `cap` bytes keeping head and tail, cut on char
/// boundaries, with a marker in between.
pub fn truncate_head_tail(text: &str, cap: usize) -> (String, bool) {
    if text.len() <= cap {
        return (text.to_string(), false);
    }
    let marker = "\n...[truncated]...\n";
    let budget = cap.saturating_sub(marker.len());
    let head_len = floor_char_boundary(text, budget / 2);
    let tail_start = ceil_char_boundary(text, text.len() - (budget - head_len));
    let mut out = String::with_capacity(cap);
    out.push_str(&text[..head_len]);
    out.push_str(marker);
    out.push_str(&text[tail_start..]);
    (out, true)
}

fn floor_char_boundary(s: &str, mut i: usize) -> usize {
    while i > 0 && !s.is_char_boundary(i) {
        i -= 1;
    }
    i
}

fn ceil_char_boundary(s: &str, mut i: usize) -> usize {
    while i < s.len() && !s.is_char_boundary(i) {
        i += 1;
    }
    i
}

/// Drop repeated stack-trace material: consecutive duplicate lines, and any
/// frame (`at ...`) or `Caused by` line already seen earlier in the text.
pub fn trim_duplicate_stack_traces(text: &str) -> String {
    let mut seen_frames: HashSet<String> = HashSet::new();
    let mut out: Vec<&str> = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(prev) = out.last() {
            if prev.trim() == trimmed && !trimmed.is_empty() {
                continue;
            }
        }
        let is_frame = trimmed.starts_with("at ") || trimmed.starts_with("Caused by");
        if is_frame && !seen_frames.insert(trimmed.to_string()) {
            continue;
        }
        out.push(line);
    }
    out.join("\n")
}

/// Strip markup and boilerplate from a fetched page, leaving readable text.
pub fn clean_page(raw: &str) -> String {
    static SCRIPT: OnceLock<Regex> = OnceLock::new();
    static TAG: OnceLock<Regex> = OnceLock::new();
    let script = SCRIPT.get_or_init(|| {
        Regex::new(r"(?is)<(script|style|nav|footer|header)[^>]*>.*?</(script|style|nav|footer|header)>")
            .expect("static regex")
    });
    let tag = TAG.get_or_init(|| Regex::new(r"(?s)<[^>]+>").expect("static regex"));
    let no_blocks = script.replace_all(raw, " ");
    let no_tags = tag.replace_all(&no_blocks, "\n");
    let decoded = no_tags
        .replace("&nbsp;", " ")
        .replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&amp;", "&");
    let boiler = ["cookie", "subscribe", "sign in", "log in", "all rights reserved", "privacy policy"];
    decoded
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .filter(|l| {
            let lower = l.to_lowercase();
            !(l.len() < 80 && boiler.iter().any(|b| lower.contains(b)))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn secret_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r#"(?i)\b(api[_-]?key|access[_-]?key|secret(?:[_-]?key)?|password|passwd|token|authorization)(["']?\s*[:=]\s*["']?)(?:bearer\s+)?[^\s"',;]+"#,
        )
        .expect("static regex")
    })
}

fn bearer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bbearer\s+[A-Za-z0-9._~+/=-]{8,}").expect("static regex"))
}

/// Mask credential-looking values (`api_key=...`, `Bearer ...`).
pub fn redact(text: &str) -> String {
    let once = secret_re().replace_all(text, "${1}${2}<redacted>");
    bearer_re().replace_all(&once, "Bearer <redacted>").into_owned()
}

/// [`redact`] applied to every string in a JSON value.
pub fn redact_value(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::String(s) => {
            let r = redact(s);
            if r != *s {
                *s = r;
            }
        }
        serde_json::Value::Array(xs) => xs.iter_mut().for_each(redact_value),
        serde_json::Value::Object(m) => m.values_mut().for_each(redact_value),
        _ => {}
    }
}
