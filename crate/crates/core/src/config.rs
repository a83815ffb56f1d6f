//! Engine configuration: a TOML file with every field optional, then
//! `OPSDESK_*` environment overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::Budget;
use crate::pipeline::AgentSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Toml { path: String, source: toml::de::Error },
    #[error("environment variable {name}: cannot parse `{value}`")]
    Env { name: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Minimum cosine for dispatch to a specialized agent.
    pub route: f64,
    /// Minimum cosine for answering from a solved ticket.
    pub quick_answer: f64,
    /// Minimum posterior for automatic cause assignment.
    pub assign: f64,
    /// Minimum number of agreeing drafts for an SOP to be accepted.
    pub stability: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { route: 0.75, quick_answer: 0.85, assign: 0.8, stability: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub max_iterations: usize,
    pub loop_k: usize,
    pub single_shot_k: usize,
    pub coarse_n: usize,
    pub observation_cap_bytes: usize,
    pub web_min_chars: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            max_iterations: 8,
            loop_k: 5,
            single_shot_k: 10,
            coarse_n: 50,
            observation_cap_bytes: 8 * 1024,
            web_min_chars: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    pub runs: usize,
    pub similar_sops: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self { runs: 3, similar_sops: 3 }
    }
}

/// Required fields per request type. Each inner list is an any-of group:
/// the group is satisfied when at least one of its fields is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClarificationConfig {
    pub max_follow_ups: usize,
    pub required_fields: BTreeMap<String, Vec<Vec<String>>>,
    /// Follow-up question per field; the first field of a missing group picks the question.
    pub questions: BTreeMap<String, String>,
    /// Fields a console request must carry.
    pub console_required: Vec<String>,
}

impl Default for ClarificationConfig {
    fn default() -> Self {
        let group = |fs: &[&str]| fs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let mut required = BTreeMap::new();
        required.insert("troubleshooting".to_string(), vec![group(&["symptom"]), group(&["error_log", "task_id"])]);
        required.insert("consultation".to_string(), vec![group(&["topic"])]);
        let mut questions = BTreeMap::new();
        questions.insert(
            "symptom".to_string(),
            "Please paste the most relevant log snippet or the exact error message you see, ideally the lines around the first error.".to_string(),
        );
        questions.insert(
            "error_log".to_string(),
            "Please paste the most relevant log snippet, ideally the lines around the first error or the exception stack trace."
                .to_string(),
        );
        questions.insert("task_id".to_string(), "Which task ID is affected?".to_string());
        questions.insert("topic".to_string(), "Which feature or component is your question about?".to_string());
        Self {
            max_follow_ups: 3,
            required_fields: required,
            questions,
            console_required: group(&["task_id", "error_log"]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Templates {
    pub refusal: String,
    pub safe_response: String,
    pub missing_information: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            refusal: "Sorry, I can only help with questions about the data platform, such as failed tasks, error messages or how to use a feature.".into(),
            safe_response: "I could not reach a reliable conclusion within the allotted search budget. Your request has been kept with its diagnostic context; please escalate it to the on-call engineer.".into(),
            missing_information: "missing information".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    /// `http` for a live endpoint, `replay` for a transcript file, `scripted` for a rule file.
    pub provider: String,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub transcript: Option<PathBuf>,
    pub script: Option<PathBuf>,
    /// `hashing` (deterministic, offline) or `http` (the endpoint above).
    pub embedder: String,
    pub embedding_dimension: usize,
    pub concurrency: usize,
    pub timeout_secs: u64,
    /// Additional providers by name, for stage routing.
    pub providers: BTreeMap<String, ProviderSpec>,
    /// Stage tag -> named provider.
    pub stage_routes: BTreeMap<String, String>,
}

/// A named provider; `kind` takes the same values as `LlmConfig::provider`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderSpec {
    pub kind: String,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub transcript: Option<PathBuf>,
    pub script: Option<PathBuf>,
}

impl LlmConfig {
    /// The default provider as a spec.
    pub fn default_spec(&self) -> ProviderSpec {
        ProviderSpec {
            kind: self.provider.clone(),
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
            api_key: self.api_key.clone(),
            transcript: self.transcript.clone(),
            script: self.script.clone(),
        }
    }
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            provider: "scripted".into(),
            endpoint: None,
            model: None,
            api_key: None,
            transcript: None,
            script: None,
            embedder: "hashing".into(),
            embedding_dimension: 256,
            concurrency: 8,
            timeout_secs: 60,
            providers: BTreeMap::new(),
            stage_routes: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CauseConfig {
    pub causes: Vec<String>,
    pub vocabulary: Vec<String>,
    pub alpha: f64,
    /// Expert priors; when set they replace the fitted ones.
    pub priors: Option<BTreeMap<String, f64>>,
}

impl Default for CauseConfig {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect();
        Self {
            causes: s(&[
                "user_code_error",
                "permission_missing",
                "resource_exhausted",
                "schema_mismatch",
                "data_quality",
                "configuration_error",
                "platform_bug",
                "dependency_failure",
                "quota_exceeded",
            ]),
            vocabulary: s(&[
                "grant_permission",
                "schema_change",
                "fix_sql",
                "increase_resources",
                "clean_data",
                "change_config",
                "restart_task",
                "platform_patch",
                "raise_quota",
                "rerun_upstream",
            ]),
            alpha: 1.0,
            priors: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub listen: String,
    #[serde(skip_serializing)]
    pub bearer_token: Option<String>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { listen: "127.0.0.1:8080".into(), bearer_token: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub tools_dir: Option<PathBuf>,
    pub web_fixtures: Option<PathBuf>,
    pub escalation_queue: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data_dir: PathBuf::from("data"), tools_dir: None, web_fixtures: None, escalation_queue: None }
    }
}

impl Paths {
    pub fn escalation_queue(&self) -> PathBuf {
        self.escalation_queue.clone().unwrap_or_else(|| self.data_dir.join("escalations.jsonl"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub thresholds: Thresholds,
    pub search: SearchConfig,
    pub budget: BudgetConfig,
    pub extraction: ExtractionConfig,
    pub clarification: ClarificationConfig,
    pub templates: Templates,
    pub llm: LlmConfig,
    pub causes: CauseConfig,
    pub server: ServerConfig,
    pub paths: Paths,
    /// Specialized agents and their routing keywords.
    pub agents: Vec<AgentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetConfig {
    pub max_chat_calls: u32,
    pub max_total_tokens: u64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        let b = Budget::default();
        Self { max_chat_calls: b.max_chat_calls, max_total_tokens: b.max_total_tokens }
    }
}

impl BudgetConfig {
    pub fn budget(&self) -> Budget {
        Budget { max_chat_calls: self.max_chat_calls, max_total_tokens: self.max_total_tokens }
    }
}

fn parse_env<T: std::str::FromStr>(name: &str, value: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::Env { name: name.into(), value: value.into() })
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Load `path` if given, apply process environment overrides, validate.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.display().to_string(), source })?;
                Self::from_toml(&text).map_err(|source| ConfigError::Toml { path: p.display().to_string(), source })?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply overrides from `get` (the process environment in production).
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        macro_rules! over {
            ($name:literal, $field:expr) => {
                if let Some(v) = get($name) {
                    $field = parse_env($name, &v)?;
                }
            };
        }
        over!("OPSDESK_TAU_ROUTE", self.thresholds.route);
        over!("OPSDESK_TAU_QA", self.thresholds.quick_answer);
        over!("OPSDESK_TAU_ASSIGN", self.thresholds.assign);
        over!("OPSDESK_STABILITY_THRESHOLD", self.thresholds.stability);
        over!("OPSDESK_MAX_ITERATIONS", self.search.max_iterations);
        over!("OPSDESK_MAX_CHAT_CALLS", self.budget.max_chat_calls);
        over!("OPSDESK_MAX_TOTAL_TOKENS", self.budget.max_total_tokens);
        over!("OPSDESK_LISTEN", self.server.listen);
        over!("OPSDESK_DATA_DIR", self.paths.data_dir);
        over!("OPSDESK_LLM_PROVIDER", self.llm.provider);
        if let Some(v) = get("OPSDESK_LLM_ENDPOINT") {
            self.llm.endpoint = Some(v);
        }
        if let Some(v) = get("OPSDESK_LLM_MODEL") {
            self.llm.model = Some(v);
        }
        if let Some(v) = get("OPSDESK_LLM_API_KEY") {
            self.llm.api_key = Some(v);
        }
        if let Some(v) = get("OPSDESK_BEARER_TOKEN") {
            self.server.bearer_token = Some(v);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.thresholds;
        for (name, v) in [("route", t.route), ("quick_answer", t.quick_answer)] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(ConfigError::Invalid(format!("thresholds.{name} must lie in [-1, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&t.assign) {
            return Err(ConfigError::Invalid("thresholds.assign must lie in [0, 1]".into()));
        }
        if self.search.max_iterations == 0 {
            return Err(ConfigError::Invalid("search.max_iterations must be at least 1".into()));
        }
        if self.search.loop_k == 0 || self.search.coarse_n < self.search.loop_k.max(self.search.single_shot_k) {
            return Err(ConfigError::Invalid("search needs coarse_n >= k >= 1".into()));
        }
        if self.budget.max_chat_calls == 0 || self.budget.max_total_tokens == 0 {
            return Err(ConfigError::Invalid("budget limits must be positive".into()));
        }
        if self.extraction.runs == 0 || t.stability > self.extraction.runs {
            return Err(ConfigError::Invalid("need 1 <= thresholds.stability <= extraction.runs".into()));
        }
        if self.causes.alpha < 0.0 {
            return Err(ConfigError::Invalid("causes.alpha must be non-negative".into()));
        }
        for (stage, name) in &self.llm.stage_routes {
            if !self.llm.providers.contains_key(name) {
                return Err(ConfigError::Invalid(format!("llm.stage_routes.{stage} names unknown provider `{name}`")));
            }
        }
        if self.llm.embedding_dimension == 0 {
            return Err(ConfigError::Invalid("llm.embedding_dimension must be positive".into()));
        }
        Ok(())
    }
}
