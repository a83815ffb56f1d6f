//! Assembling the whole stack, either from configuration and the data
//! directory or from a read-only fixture world.
//!
//! Data directory layout:
//!
//! ```text
//! {data_dir}/kb/sop/                 level-1 store
//! {data_dir}/kb/internal/{base}/     one level-2 store per base
//! {data_dir}/tickets/solved.jsonl    solved-ticket repository
//! {data_dir}/escalations.jsonl       escalation queue (unless configured)
//! ```
//!
//! A world directory has `sop/`, `internal/{base}/`, `web/`, `tools/` and
//! optionally `agents.json` and `solved.jsonl`, in the ingestion formats.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::config::{Config, ConfigError, LlmConfig, ProviderSpec};
use crate::deepsearch::{DeepSearch, ToolRegistry};
use crate::kb::ingest::ingest_dir;
use crate::kb::web::{DirectoryWebProvider, UnavailableWebProvider, WebSearchProvider};
use crate::kb::{KbError, KnowledgeHierarchy, KnowledgeStore, Level};
use crate::llm::http::{HttpChatProvider, HttpEmbedder, HttpProviderConfig};
use crate::llm::replay::{ReplayProvider, Script, ScriptedProvider, Transcript, TranscriptError};
use crate::llm::{ChatProvider, DelayProvider, Embedder, HashingEmbedder, LlmError, LlmGateway};
use crate::pipeline::{AgentRegistry, AgentSpec, Pipeline, PipelineSettings};
use crate::sop_extract::queue::EscalationQueue;
use crate::sop_extract::ExtractionParams;
use crate::tickets::{read_jsonl, SolvedTicket, TicketError, TicketRepository};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Tickets(#[from] TicketError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
    #[error("{path}: {detail}")]
    Invalid { path: String, detail: String },
}

fn http_config(spec: &ProviderSpec, timeout_secs: u64) -> Result<HttpProviderConfig, RuntimeError> {
    let endpoint = spec.endpoint.clone().ok_or_else(|| ConfigError::Invalid("http provider needs an endpoint".into()))?;
    Ok(HttpProviderConfig {
        endpoint,
        model: spec.model.clone().unwrap_or_else(|| "default".into()),
        api_key: spec.api_key.clone(),
        timeout_secs,
    })
}

/// Instantiate one chat provider from its spec.
pub fn build_provider(name: &str, spec: &ProviderSpec, timeout_secs: u64) -> Result<Arc<dyn ChatProvider>, RuntimeError> {
    Ok(match spec.kind.as_str() {
        "http" => Arc::new(HttpChatProvider::new(http_config(spec, timeout_secs)?)),
        "replay" => {
            let path = spec.transcript.as_ref().ok_or_else(|| ConfigError::Invalid(format!("provider `{name}` needs a transcript")))?;
            Arc::new(ReplayProvider::new(name, Transcript::load(path)?))
        }
        "scripted" => {
            let script = match &spec.script {
                Some(p) => Script::load(p)?,
                None => {
                    tracing::warn!(provider = name, "scripted provider without a script; every chat call will fail");
                    Script::new(Vec::new())
                }
            };
            Arc::new(ScriptedProvider::new(name, script)?)
        }
        other => return Err(ConfigError::Invalid(format!("unknown provider kind `{other}`")).into()),
    })
}

pub fn build_embedder(llm: &LlmConfig) -> Result<Arc<dyn Embedder>, RuntimeError> {
    Ok(match llm.embedder.as_str() {
        "hashing" => Arc::new(HashingEmbedder::new(llm.embedding_dimension)),
        "http" => Arc::new(HttpEmbedder::new(http_config(&llm.default_spec(), llm.timeout_secs)?, llm.embedding_dimension)),
        other => return Err(ConfigError::Invalid(format!("unknown embedder `{other}`")).into()),
    })
}

/// Gateway with the default provider, the named providers and stage routes.
/// `delay` wraps every provider in a synthetic per-call delay.
pub fn build_gateway(
    llm: &LlmConfig,
    default_provider: Option<Arc<dyn ChatProvider>>,
    delay: Option<Duration>,
) -> Result<LlmGateway, RuntimeError> {
    let wrap = |p: Arc<dyn ChatProvider>| -> Arc<dyn ChatProvider> {
        match delay {
            Some(d) if !d.is_zero() => Arc::new(DelayProvider::new(p, d)),
            _ => p,
        }
    };
    let default = match default_provider {
        Some(p) => p,
        None => build_provider("default", &llm.default_spec(), llm.timeout_secs)?,
    };
    let mut gw = LlmGateway::new(wrap(default), build_embedder(llm)?).with_concurrency_limit(llm.concurrency.max(1));
    for (name, spec) in &llm.providers {
        gw = gw.with_provider(name.clone(), wrap(build_provider(name, spec, llm.timeout_secs)?));
    }
    for (stage, name) in &llm.stage_routes {
        gw = gw.route_stage(stage.clone(), name.clone());
    }
    Ok(gw)
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>, RuntimeError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let io = |e: std::io::Error| RuntimeError::Invalid { path: dir.display().to_string(), detail: e.to_string() };
    let mut out: Vec<PathBuf> = fs::read_dir(dir).map_err(io)?.filter_map(Result::ok).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    out.sort();
    Ok(out)
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn report_failures(dir: &Path, failures: &[crate::kb::ingest::IngestFailure]) {
    for f in failures {
        tracing::warn!(dir = %dir.display(), file = %f.file, reason = %f.reason, "fixture entry skipped");
    }
}

/// Every long-lived component of a running deployment.
pub struct Runtime {
    pub config: Config,
    pub gateway: Arc<LlmGateway>,
    pub hierarchy: Arc<KnowledgeHierarchy>,
    pub engine: Arc<DeepSearch>,
    pub pipeline: Arc<Pipeline>,
    pub tickets: Arc<TicketRepository>,
    pub queue: Arc<EscalationQueue>,
}

struct Parts {
    sop: Arc<KnowledgeStore>,
    internal: Vec<Arc<KnowledgeStore>>,
    web: Arc<dyn WebSearchProvider>,
    tools: ToolRegistry,
    tickets: TicketRepository,
    agents: Vec<AgentSpec>,
}

impl Runtime {
    /// File-backed deployment rooted at `config.paths.data_dir`.
    pub fn open(config: Config) -> Result<Self, RuntimeError> {
        Self::open_with(config, None, None)
    }

    /// As [`Runtime::open`], optionally overriding the default provider and
    /// adding a synthetic per-call delay.
    pub fn open_with(config: Config, provider: Option<Arc<dyn ChatProvider>>, delay: Option<Duration>) -> Result<Self, RuntimeError> {
        config.validate()?;
        let gateway = build_gateway(&config.llm, provider, delay)?;
        let emb = gateway.embedder().clone();
        let kb = config.paths.data_dir.join("kb");
        let sop = Arc::new(KnowledgeStore::open(&kb.join("sop"), Level::Sop, "sop", emb.clone())?);
        let internal = subdirs(&kb.join("internal"))?
            .into_iter()
            .map(|d| KnowledgeStore::open(&d, Level::Internal, dir_name(&d), emb.clone()).map(Arc::new))
            .collect::<Result<Vec<_>, _>>()?;
        let web: Arc<dyn WebSearchProvider> = match &config.paths.web_fixtures {
            Some(d) => Arc::new(DirectoryWebProvider::load(d)?),
            None => Arc::new(UnavailableWebProvider),
        };
        let tools = config.paths.tools_dir.as_deref().map(ToolRegistry::platform_stubs).unwrap_or_default();
        let tickets = TicketRepository::open(&config.paths.data_dir.join("tickets").join("solved.jsonl"), emb)?;
        let agents = config.agents.clone();
        Self::assemble(config, gateway, Parts { sop, internal, web, tools, tickets, agents })
    }

    /// In-memory deployment loaded from a fixture world. Nothing under
    /// `dir` is modified; escalations go to the configured queue path.
    pub fn from_world(dir: &Path, provider: Arc<dyn ChatProvider>, config: Config) -> Result<Self, RuntimeError> {
        Self::from_world_with(dir, provider, config, None)
    }

    pub fn from_world_with(
        dir: &Path,
        provider: Arc<dyn ChatProvider>,
        config: Config,
        delay: Option<Duration>,
    ) -> Result<Self, RuntimeError> {
        config.validate()?;
        let gateway = build_gateway(&config.llm, Some(provider), delay)?;
        let emb = gateway.embedder().clone();
        let sop = Arc::new(KnowledgeStore::new(Level::Sop, "sop", emb.clone()));
        if dir.join("sop").is_dir() {
            report_failures(&dir.join("sop"), &ingest_dir(&sop, &dir.join("sop"))?.failures);
        }
        let mut internal = Vec::new();
        for d in subdirs(&dir.join("internal"))? {
            let store = KnowledgeStore::new(Level::Internal, dir_name(&d), emb.clone());
            report_failures(&d, &ingest_dir(&store, &d)?.failures);
            internal.push(Arc::new(store));
        }
        let web: Arc<dyn WebSearchProvider> = if dir.join("web").is_dir() {
            Arc::new(DirectoryWebProvider::load(&dir.join("web"))?)
        } else {
            Arc::new(UnavailableWebProvider)
        };
        let tools = if dir.join("tools").is_dir() { ToolRegistry::platform_stubs(&dir.join("tools")) } else { ToolRegistry::new() };
        let tickets = TicketRepository::new(emb);
        if dir.join("solved.jsonl").is_file() {
            tickets.extend(read_jsonl::<SolvedTicket>(&dir.join("solved.jsonl"))?)?;
        }
        let mut agents = config.agents.clone();
        let agents_path = dir.join("agents.json");
        if agents_path.is_file() {
            let invalid = |detail: String| RuntimeError::Invalid { path: agents_path.display().to_string(), detail };
            let text = fs::read_to_string(&agents_path).map_err(|e| invalid(e.to_string()))?;
            let extra: Vec<AgentSpec> = serde_json::from_str(&text).map_err(|e| invalid(e.to_string()))?;
            agents.extend(extra);
        }
        Self::assemble(config, gateway, Parts { sop, internal, web, tools, tickets, agents })
    }

    fn assemble(config: Config, gateway: LlmGateway, parts: Parts) -> Result<Self, RuntimeError> {
        let gateway = Arc::new(gateway);
        let hierarchy = Arc::new(
            KnowledgeHierarchy::new(parts.sop, parts.internal).with_web(parts.web).with_web_min_chars(config.search.web_min_chars),
        );
        let engine = Arc::new(
            DeepSearch::new(gateway.clone(), hierarchy.clone(), Arc::new(parts.tools)).with_templates(config.templates.clone()),
        );
        let agents = AgentRegistry::build(&gateway, parts.agents)?;
        let tickets = Arc::new(parts.tickets);
        let pipeline = Arc::new(
            Pipeline::new(engine.clone(), agents, PipelineSettings::from(&config)).with_ticket_repository(tickets.clone()),
        );
        let queue = Arc::new(EscalationQueue::new(config.paths.escalation_queue()));
        Ok(Self { config, gateway, hierarchy, engine, pipeline, tickets, queue })
    }

    pub fn extraction_params(&self) -> ExtractionParams {
        ExtractionParams {
            runs: self.config.extraction.runs,
            stability_threshold: self.config.thresholds.stability,
            similar: self.config.extraction.similar_sops,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::replay::ScriptRule;

    #[test]
    fn world_loads_every_part() {
        let dir = tempfile::tempdir().unwrap();
        let w = dir.path();
        fs::create_dir_all(w.join("sop")).unwrap();
        fs::write(
            w.join("sop/sop-1.json"),
            r#"{"problem_desc":"disk full","content":[{"root_cause":"quota","investigation_steps":[{"step":1,"target":"hdfs","action":"check quota","observations":[{"condition":"over quota","outcome":"confirmed"}]}],"resolution_steps":[{"step":1,"action":"raise quota"}]}]}"#,
        )
        .unwrap();
        fs::create_dir_all(w.join("internal/hive")).unwrap();
        fs::write(w.join("internal/hive/doc-1.txt"), "lifecycle\nset ttl").unwrap();
        fs::write(w.join("agents.json"), r#"[{"name":"hive","keywords":["hive sql"]}]"#).unwrap();
        fs::write(w.join("solved.jsonl"), "{\"ticket_id\":\"T1\",\"summary\":\"s\",\"resolution\":\"r\"}\n").unwrap();
        let mut cfg = Config::default();
        cfg.paths.data_dir = w.join("data");
        let provider = Arc::new(ScriptedProvider::new("s", Script::new(vec![ScriptRule::respond("{}")])).unwrap());
        let rt = Runtime::from_world(w, provider, cfg).unwrap();
        assert_eq!(rt.hierarchy.sop_store().len(), 1);
        assert_eq!(rt.hierarchy.internal_stores().len(), 1);
        assert!(rt.pipeline.agents().contains("hive"));
        assert_eq!(rt.tickets.len(), 1);
        assert!(!w.join("data").exists());
    }

    #[test]
    fn open_creates_file_backed_stores() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = Config::default();
        cfg.paths.data_dir = dir.path().to_path_buf();
        let rt = Runtime::open(cfg).unwrap();
        assert!(rt.hierarchy.sop_store().is_empty());
        assert!(dir.path().join("kb/sop").is_dir());
        let mut bad = Config::default();
        bad.llm.provider = "carrier-pigeon".into();
        bad.paths.data_dir = dir.path().to_path_buf();
        assert!(matches!(Runtime::open(bad), Err(RuntimeError::Config(_))));
    }
}
