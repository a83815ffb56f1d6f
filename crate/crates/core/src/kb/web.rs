//! Level-3 search. The live integration is a seam; the bundled provider
//! serves pages from a fixture directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::KbError;
use crate::text::{clean_page, tokenize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebPage {
    pub url: String,
    pub text: String,
}

pub trait WebSearchProvider: Send + Sync {
    fn id(&self) -> &str;
    /// Raw pages, best first. Cleaning and filtering happen in [`web_search`].
    fn search(&self, query: &str, max_results: usize) -> Result<Vec<WebPage>, KbError>;
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WebResults {
    pub pages: Vec<WebPage>,
    /// The provider failed; `pages` is empty.
    pub unavailable: bool,
}

/// Search, strip boilerplate, and drop pages whose cleaned text is shorter
/// than `min_chars`. Provider failure yields an empty, flagged result.
pub fn web_search(provider: &dyn WebSearchProvider, query: &str, max_results: usize, min_chars: usize) -> WebResults {
    if max_results == 0 {
        return WebResults::default();
    }
    match provider.search(query, max_results) {
        Ok(raw) => WebResults {
            pages: raw
                .into_iter()
                .map(|p| WebPage { url: p.url, text: clean_page(&p.text) })
                .filter(|p| !p.text.trim().is_empty() && p.text.chars().count() >= min_chars)
                .take(max_results)
                .collect(),
            unavailable: false,
        },
        Err(err) => {
            tracing::warn!(provider = provider.id(), %err, "web search unavailable");
            WebResults { pages: Vec::new(), unavailable: true }
        }
    }
}

/// Fixture-backed provider. Each file in the directory is one page: the
/// first line is its URL, the rest is the page body. Pages are ranked by
/// the number of distinct query tokens they contain; pages sharing none are
/// not returned.
#[derive(Debug, Clone)]
pub struct DirectoryWebProvider {
    pages: Vec<WebPage>,
}

impl DirectoryWebProvider {
    pub fn load(dir: &Path) -> Result<Self, KbError> {
        let io = |source| KbError::Io { path: dir.display().to_string(), source };
        let mut files: Vec<_> = fs::read_dir(dir).map_err(io)?.filter_map(Result::ok).map(|e| e.path()).collect();
        files.sort();
        let mut pages = Vec::new();
        for path in files.into_iter().filter(|p| p.is_file()) {
            let text = fs::read_to_string(&path).map_err(|source| KbError::Io { path: path.display().to_string(), source })?;
            let (url, body) = text.split_once('\n').unwrap_or((text.as_str(), ""));
            pages.push(WebPage { url: url.trim().to_string(), text: body.to_string() });
        }
        Ok(Self { pages })
    }

    pub fn from_pages(pages: Vec<WebPage>) -> Self {
        Self { pages }
    }
}

impl WebSearchProvider for DirectoryWebProvider {
    fn id(&self) -> &str {
        "directory"
    }

    fn search(&self, query: &str, max_results: usize) -> Result<Vec<WebPage>, KbError> {
        let mut q = tokenize(query);
        q.sort();
        q.dedup();
        let mut scored: Vec<(usize, &WebPage)> = self
            .pages
            .iter()
            .map(|p| {
                let toks: std::collections::HashSet<String> = tokenize(&p.text).into_iter().collect();
                (q.iter().filter(|t| toks.contains(*t)).count(), p)
            })
            .filter(|(s, _)| *s > 0)
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.url.cmp(&b.1.url)));
        Ok(scored.into_iter().take(max_results).map(|(_, p)| p.clone()).collect())
    }
}

/// Always fails; stands in for an unreachable live provider.
#[derive(Debug, Clone, Default)]
pub struct UnavailableWebProvider;

impl WebSearchProvider for UnavailableWebProvider {
    fn id(&self) -> &str {
        "unavailable"
    }

    fn search(&self, _query: &str, _max_results: usize) -> Result<Vec<WebPage>, KbError> {
        Err(KbError::ProviderUnavailable("no live web provider configured".into()))
    }
}
