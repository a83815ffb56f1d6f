//! Uniform chat, structured-output and embedding contract.
//!
//! Every model call in the engine goes through [`LlmGateway`]: it validates
//! the request, picks the provider configured for the request's stage tag,
//! enforces the per-request [`Budget`], bounds outbound concurrency, and
//! records the exchange in the caller's [`RequestContext`].
//!
//! Providers are pluggable ([`ChatProvider`]). Tests and the benchmark use
//! [`replay::ScriptedProvider`] and [`replay::ReplayProvider`] so that whole
//! pipelines run deterministically without a network.

pub mod embed;
pub mod http;
pub mod replay;
pub mod structured;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, ExecPolicy};
pub use embed::{Embedder, EmbeddingVector, HashingEmbedder};
pub use structured::{FieldKind, FieldSpec, SchemaDescriptor};

/// Default sampling parameters used for every stage.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_TOP_P: f64 = 0.95;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("transport timeout after {0:?}")]
    TransportTimeout(Duration),
    #[error("malformed output for schema `{schema}`: {detail}")]
    MalformedOutput { schema: String, detail: String },
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("text at index {0} is empty")]
    EmptyText(usize),
    #[error("embedding batch is empty")]
    EmptyBatch,
}

impl LlmError {
    pub fn is_budget(&self) -> bool {
        matches!(self, LlmError::BudgetExceeded(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    /// Stage label (planner, filter, summarizer, ...) used for provider
    /// selection and replay fingerprints.
    pub tag: String,
}

impl ChatRequest {
    pub fn new(tag: impl Into<String>, messages: Vec<Message>) -> Self {
        Self {
            messages,
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            max_tokens: DEFAULT_MAX_TOKENS,
            tag: tag.into(),
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("messages must not be empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LlmError::InvalidRequest(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// All message contents, one `role: content` block per message.
    pub fn prompt_text(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            out.push_str(&m.role.to_string());
            out.push_str(": ");
            out.push_str(&m.content);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt: u64,
    pub completion: u64,
}

impl TokenUsage {
    pub fn total(&self) -> u64 {
        self.prompt + self.completion
    }
}

/// What a provider hands back; usage is optional because stubs and some
/// servers do not report it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProviderReply {
    pub text: String,
    pub usage: Option<TokenUsage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub token_usage: TokenUsage,
    pub provider_id: String,
}

pub trait ChatProvider: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<ProviderReply, LlmError>;
}

/// Character/4 token estimate used when a provider reports no usage.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub max_chat_calls: u32,
    pub max_total_tokens: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Self { max_chat_calls: 20, max_total_tokens: 400_000 }
    }
}

/// Running counters for one request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetTracker {
    pub budget: Budget,
    pub chat_calls: u32,
    pub total_tokens: u64,
}

impl BudgetTracker {
    pub fn new(budget: Budget) -> Self {
        Self { budget, chat_calls: 0, total_tokens: 0 }
    }

    pub fn is_exhausted(&self) -> bool {
        self.chat_calls >= self.budget.max_chat_calls
            || self.total_tokens >= self.budget.max_total_tokens
    }

    /// Admit one more call whose prompt and completion may cost up to
    /// `worst_case_tokens`.
    fn admit(&self, worst_case_tokens: u64) -> Result<(), LlmError> {
        if self.chat_calls >= self.budget.max_chat_calls {
            return Err(LlmError::BudgetExceeded(format!(
                "chat call limit {} reached",
                self.budget.max_chat_calls
            )));
        }
        if self.total_tokens + worst_case_tokens > self.budget.max_total_tokens {
            return Err(LlmError::BudgetExceeded(format!(
                "token limit {} would be exceeded ({} used, up to {} requested)",
                self.budget.max_total_tokens, self.total_tokens, worst_case_tokens
            )));
        }
        Ok(())
    }
}

/// One model call as seen by the request log. Prompts are kept out; the
/// fingerprint identifies them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub tag: String,
    pub fingerprint: String,
    pub provider_id: String,
    pub usage: TokenUsage,
    pub ok: bool,
}

/// Per-request state threaded through every model call.
#[derive(Debug, Clone)]
pub struct RequestContext {
    pub budget: BudgetTracker,
    pub exchanges: Vec<Exchange>,
}

impl RequestContext {
    pub fn new(budget: Budget) -> Self {
        Self { budget: BudgetTracker::new(budget), exchanges: Vec::new() }
    }
}

struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(max: usize) -> Self {
        Self { max: max.max(1), in_flight: Mutex::new(0), cv: Condvar::new() }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut n = self.in_flight.lock().expect("limiter poisoned");
        while *n >= self.max {
            n = self.cv.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        LimiterGuard { limiter: self }
    }
}

struct LimiterGuard<'a> {
    limiter: &'a Limiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.in_flight.lock().expect("limiter poisoned");
        *n -= 1;
        self.limiter.cv.notify_one();
    }
}

/// Stage-aware front door to chat and embedding providers.
pub struct LlmGateway {
    default_provider: Arc<dyn ChatProvider>,
    providers: BTreeMap<String, Arc<dyn ChatProvider>>,
    stage_routes: BTreeMap<String, String>,
    embedder: Arc<dyn Embedder>,
    limiter: Limiter,
    exec: ExecPolicy,
}

impl LlmGateway {
    pub fn new(default_provider: Arc<dyn ChatProvider>, embedder: Arc<dyn Embedder>) -> Self {
        Self {
            default_provider,
            providers: BTreeMap::new(),
            stage_routes: BTreeMap::new(),
            embedder,
            limiter: Limiter::new(16),
            exec: ExecPolicy::default(),
        }
    }

    pub fn with_provider(mut self, name: impl Into<String>, provider: Arc<dyn ChatProvider>) -> Self {
        self.providers.insert(name.into(), provider);
        self
    }

    /// Send requests tagged `stage` to the provider registered as `provider`.
    pub fn route_stage(mut self, stage: impl Into<String>, provider: impl Into<String>) -> Self {
        self.stage_routes.insert(stage.into(), provider.into());
        self
    }

    pub fn with_concurrency_limit(mut self, max: usize) -> Self {
        self.limiter = Limiter::new(max);
        self
    }

    pub fn with_exec_policy(mut self, exec: ExecPolicy) -> Self {
        self.exec = exec;
        self
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    fn provider_for(&self, tag: &str) -> Result<&Arc<dyn ChatProvider>, LlmError> {
        match self.stage_routes.get(tag) {
            Some(name) => self.providers.get(name).ok_or_else(|| {
                LlmError::ProviderUnavailable(format!("stage `{tag}` routed to unknown provider `{name}`"))
            }),
            None => Ok(&self.default_provider),
        }
    }

    pub fn chat(&self, request: &ChatRequest, ctx: &mut RequestContext) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let provider = self.provider_for(&request.tag)?;
        let prompt_estimate = estimate_tokens(&request.prompt_text());
        ctx.budget.admit(prompt_estimate + u64::from(request.max_tokens))?;

        let fingerprint = replay::fingerprint(&request.tag, &request.messages);
        ctx.budget.chat_calls += 1;
        let result = {
            let _slot = self.limiter.acquire();
            provider.complete(request)
        };
        match result {
            Ok(reply) => {
                let usage = reply.usage.unwrap_or(TokenUsage {
                    prompt: prompt_estimate,
                    completion: estimate_tokens(&reply.text),
                });
                ctx.budget.total_tokens += usage.total();
                ctx.exchanges.push(Exchange {
                    tag: request.tag.clone(),
                    fingerprint,
                    provider_id: provider.id().to_string(),
                    usage,
                    ok: true,
                });
                Ok(ChatResponse { text: reply.text, token_usage: usage, provider_id: provider.id().to_string() })
            }
            Err(err) => {
                ctx.exchanges.push(Exchange {
                    tag: request.tag.clone(),
                    fingerprint,
                    provider_id: provider.id().to_string(),
                    usage: TokenUsage::default(),
                    ok: false,
                });
                Err(err)
            }
        }
    }

    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LlmError> {
        if texts.is_empty() {
            return Err(LlmError::EmptyBatch);
        }
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(LlmError::EmptyText(i));
        }
        let expected = self.embedder.dimension();
        let vectors = par::map(self.exec, texts, |t| self.embedder.embed(t));
        vectors
            .into_iter()
            .map(|v| {
                let v = v?;
                if v.len() != expected {
                    return Err(LlmError::DimensionMismatch { expected, actual: v.len() });
                }
                Ok(EmbeddingVector::new(v))
            })
            .collect()
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        let mut v = self.embed(&[text.to_string()])?;
        Ok(v.remove(0))
    }
}

/// Wraps a provider and sleeps before every call; used to give replay
/// benchmarks a realistic latency shape.
pub struct DelayProvider {
    inner: Arc<dyn ChatProvider>,
    delay: Duration,
}

impl DelayProvider {
    pub fn new(inner: Arc<dyn ChatProvider>, delay: Duration) -> Self {
        Self { inner, delay }
    }
}

impl ChatProvider for DelayProvider {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ProviderReply, LlmError> {
        std::thread::sleep(self.delay);
        self.inner.complete(request)
    }
}
