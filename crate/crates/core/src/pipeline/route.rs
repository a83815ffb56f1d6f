//! Dispatch of clarified requests to specialized agents by keyword
//! similarity.

use serde::{Deserialize, Serialize};

use crate::intent::IntentRecord;
use crate::llm::{EmbeddingVector, LlmError, LlmGateway};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub name: String,
    pub keywords: Vec<String>,
}

struct Agent {
    spec: AgentSpec,
    embeddings: Vec<EmbeddingVector>,
}

/// Specialized agents with their keyword embeddings computed up front.
#[derive(Default)]
pub struct AgentRegistry {
    agents: Vec<Agent>,
}

impl AgentRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn build(gateway: &LlmGateway, specs: Vec<AgentSpec>) -> Result<Self, LlmError> {
        let mut reg = Self::new();
        for s in specs {
            reg.register(gateway, s)?;
        }
        Ok(reg)
    }

    pub fn register(&mut self, gateway: &LlmGateway, spec: AgentSpec) -> Result<(), LlmError> {
        let embeddings = if spec.keywords.is_empty() { Vec::new() } else { gateway.embed(&spec.keywords)? };
        self.agents.push(Agent { spec, embeddings });
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn specs(&self) -> Vec<&AgentSpec> {
        self.agents.iter().map(|a| &a.spec).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.agents.iter().any(|a| a.spec.name == name)
    }

    /// Best (similarity, keyword) per agent, in registration order.
    pub fn similarities(&self, queries: &[EmbeddingVector]) -> Vec<(f64, String)> {
        self.agents
            .iter()
            .map(|a| {
                let mut best = (f64::NEG_INFINITY, String::new());
                for (kw, e) in a.spec.keywords.iter().zip(&a.embeddings) {
                    for q in queries {
                        let s = q.cosine(e);
                        if s > best.0 {
                            best = (s, kw.clone());
                        }
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RouteTarget {
    SpecializedAgent { name: String },
    General,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub target: RouteTarget,
    /// -1 when there was nothing to compare against.
    pub best_similarity: f64,
    pub matched_keyword: String,
    /// Embedding failed and the request fell back to the general path.
    #[serde(default)]
    pub fallback: bool,
}

impl RoutingDecision {
    fn general(best_similarity: f64, matched_keyword: String, fallback: bool) -> Self {
        Self { target: RouteTarget::General, best_similarity, matched_keyword, fallback }
    }

    pub fn agent(&self) -> Option<&str> {
        match &self.target {
            RouteTarget::SpecializedAgent { name } => Some(name),
            RouteTarget::General => None,
        }
    }
}

/// Argmax over agents, earliest on ties, then the threshold test.
pub fn decide(registry: &AgentRegistry, sims: &[(f64, String)], tau: f64) -> RoutingDecision {
    let mut best: Option<usize> = None;
    for (i, (s, _)) in sims.iter().enumerate() {
        if s.is_finite() && best.is_none_or(|b| *s > sims[b].0) {
            best = Some(i);
        }
    }
    match best {
        None => RoutingDecision::general(-1.0, String::new(), false),
        Some(i) => {
            let (s, kw) = sims[i].clone();
            if s >= tau {
                let name = registry.agents[i].spec.name.clone();
                RoutingDecision { target: RouteTarget::SpecializedAgent { name }, best_similarity: s, matched_keyword: kw, fallback: false }
            } else {
                RoutingDecision::general(s, kw, false)
            }
        }
    }
}

/// Route on the intent's keywords, or its clarified text when it has none.
pub fn route(intent: &IntentRecord, registry: &AgentRegistry, gateway: &LlmGateway, tau: f64) -> RoutingDecision {
    if registry.is_empty() {
        return RoutingDecision::general(-1.0, String::new(), false);
    }
    let texts: Vec<String> = if intent.keywords.iter().any(|k| !k.trim().is_empty()) {
        intent.keywords.iter().filter(|k| !k.trim().is_empty()).cloned().collect()
    } else {
        vec![intent.clarified_text.clone()]
    };
    match gateway.embed(&texts) {
        Ok(q) => decide(registry, &registry.similarities(&q), tau),
        Err(e) => {
            tracing::warn!(error = %e, "routing embedding failed; using the general path");
            RoutingDecision::general(-1.0, String::new(), true)
        }
    }
}
