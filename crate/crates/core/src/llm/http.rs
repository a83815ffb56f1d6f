//! Live providers speaking the common chat-completion / embeddings JSON
//! wire format (`POST {endpoint}/chat/completions`, `POST {endpoint}/embeddings`).

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ChatProvider, ChatRequest, Embedder, LlmError, ProviderReply, TokenUsage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpProviderConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    60
}

impl HttpProviderConfig {
    /// `OPSDESK_LLM_ENDPOINT`, `OPSDESK_LLM_MODEL`, `OPSDESK_LLM_API_KEY`.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var("OPSDESK_LLM_ENDPOINT").ok()?;
        Some(Self {
            endpoint,
            model: std::env::var("OPSDESK_LLM_MODEL").unwrap_or_else(|_| "default".into()),
            api_key: std::env::var("OPSDESK_LLM_API_KEY").ok(),
            timeout_secs: default_timeout_secs(),
        })
    }
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into()
}

fn map_err(err: ureq::Error, timeout: Duration) -> LlmError {
    match err {
        ureq::Error::Timeout(_) => LlmError::TransportTimeout(timeout),
        other => LlmError::ProviderUnavailable(other.to_string()),
    }
}

pub struct HttpChatProvider {
    id: String,
    config: HttpProviderConfig,
    agent: ureq::Agent,
}

impl HttpChatProvider {
    pub fn new(config: HttpProviderConfig) -> Self {
        let timeout = Duration::from_secs(config.timeout_secs);
        Self { id: format!("http:{}", config.model), agent: agent(timeout), config }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.config.endpoint.trim_end_matches('/'))
    }
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<UsageBody>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: String,
}

#[derive(Deserialize)]
struct UsageBody {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl ChatProvider for HttpChatProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ProviderReply, LlmError> {
        let timeout = Duration::from_secs(self.config.timeout_secs);
        let body = json!({
            "model": self.config.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        });
        let mut req = self.agent.post(self.url("chat/completions"));
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| map_err(e, timeout))?;
        let parsed: CompletionBody = resp.body_mut().read_json().map_err(|e| map_err(e, timeout))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| LlmError::ProviderUnavailable("response carried no choices".into()))?;
        Ok(ProviderReply {
            text,
            usage: parsed.usage.map(|u| TokenUsage { prompt: u.prompt_tokens, completion: u.completion_tokens }),
        })
    }
}

pub struct HttpEmbedder {
    config: HttpProviderConfig,
    dimension: usize,
    version: String,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(config: HttpProviderConfig, dimension: usize) -> Self {
        let timeout = Duration::from_secs(config.timeout_secs);
        Self { version: format!("http:{}:d{dimension}", config.model), dimension, agent: agent(timeout), config }
    }
}

#[derive(Deserialize)]
struct EmbeddingBody {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f32>,
}

impl Embedder for HttpEmbedder {
    fn version(&self) -> &str {
        &self.version
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, LlmError> {
        let timeout = Duration::from_secs(self.config.timeout_secs);
        let url = format!("{}/embeddings", self.config.endpoint.trim_end_matches('/'));
        let mut req = self.agent.post(url);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(json!({ "model": self.config.model, "input": text }))
            .map_err(|e| map_err(e, timeout))?;
        let parsed: EmbeddingBody = resp.body_mut().read_json().map_err(|e| map_err(e, timeout))?;
        parsed
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| LlmError::ProviderUnavailable("response carried no embedding".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::Message;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serve one canned HTTP response and hand back the request body.
    fn one_shot(body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line.trim().is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            )
            .unwrap();
            String::from_utf8(buf).unwrap()
        });
        (format!("http://{addr}/v1"), handle)
    }

    #[test]
    fn chat_wire_format() {
        let (endpoint, handle) =
            one_shot(r#"{"choices":[{"message":{"role":"assistant","content":"hi there"}}],"usage":{"prompt_tokens":7,"completion_tokens":2}}"#);
        let p = HttpChatProvider::new(HttpProviderConfig { endpoint, model: "m".into(), api_key: Some("k".into()), timeout_secs: 5 });
        let reply = p.complete(&ChatRequest::new("planner", vec![Message::user("hello")])).unwrap();
        assert_eq!(reply.text, "hi there");
        assert_eq!(reply.usage, Some(TokenUsage { prompt: 7, completion: 2 }));
        let sent: serde_json::Value = serde_json::from_str(&handle.join().unwrap()).unwrap();
        assert_eq!(sent["messages"][0]["role"], "user");
        assert_eq!(sent["temperature"], 0.1);
        assert_eq!(sent["top_p"], 0.95);
    }

    #[test]
    fn unreachable_endpoint_is_provider_unavailable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let p = HttpChatProvider::new(HttpProviderConfig {
            endpoint: format!("http://{addr}"),
            model: "m".into(),
            api_key: None,
            timeout_secs: 2,
        });
        let err = p.complete(&ChatRequest::new("t", vec![Message::user("x")])).unwrap_err();
        assert!(matches!(err, LlmError::ProviderUnavailable(_) | LlmError::TransportTimeout(_)));
    }

    #[test]
    fn embeddings_wire_format() {
        let (endpoint, handle) = one_shot(r#"{"data":[{"embedding":[0.6,0.8]}]}"#);
        let e = HttpEmbedder::new(HttpProviderConfig { endpoint, model: "emb".into(), api_key: None, timeout_secs: 5 }, 2);
        assert_eq!(e.embed("key text").unwrap(), vec![0.6, 0.8]);
        let sent: serde_json::Value = serde_json::from_str(&handle.join().unwrap()).unwrap();
        assert_eq!(sent["input"], "key text");
    }
}
