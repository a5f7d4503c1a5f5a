use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{ChatReply, ChatRequest, GatewayError, Transport, TransportError, Usage};
use crate::store::{normalize, Embedder};

/// Remote provider settings, usually read from the environment.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteSettings {
    pub base_url: String,
    pub model: String,
    pub embedding_model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl RemoteSettings {
    pub const ENV_BASE_URL: &'static str = "DECAYMEM_BASE_URL";
    pub const ENV_MODEL: &'static str = "DECAYMEM_MODEL";
    pub const ENV_EMBEDDING_MODEL: &'static str = "DECAYMEM_EMBEDDING_MODEL";
    pub const ENV_API_KEY: &'static str = "DECAYMEM_API_KEY";
    pub const ENV_TIMEOUT_SECS: &'static str = "DECAYMEM_TIMEOUT_SECS";

    pub fn from_env() -> Self {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        RemoteSettings {
            base_url: var(Self::ENV_BASE_URL).unwrap_or_else(|| "https://api.openai.com/v1".into()),
            model: var(Self::ENV_MODEL).unwrap_or_else(|| "gpt-4.1-mini".into()),
            embedding_model: var(Self::ENV_EMBEDDING_MODEL)
                .unwrap_or_else(|| "text-embedding-3-small".into()),
            api_key: var(Self::ENV_API_KEY),
            timeout: Duration::from_secs(
                var(Self::ENV_TIMEOUT_SECS).and_then(|s| s.parse().ok()).unwrap_or(60),
            ),
        }
    }

    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into()
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path)
    }

    fn post(&self, agent: &ureq::Agent, path: &str, body: &Value) -> Result<Value, TransportError> {
        let mut request = agent.post(&self.endpoint(path));
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send_json(body).map_err(classify)?;
        response.body_mut().read_json::<Value>().map_err(classify)
    }
}

fn classify(err: ureq::Error) -> TransportError {
    match err {
        ureq::Error::Timeout(t) => TransportError::Timeout(t.to_string()),
        ureq::Error::StatusCode(code) if code == 429 || code >= 500 => {
            TransportError::Timeout(format!("HTTP {code}"))
        }
        other => TransportError::Unavailable(other.to_string()),
    }
}

/// Chat-completion transport: message-list request, choice-list response.
pub struct HttpTransport {
    settings: RemoteSettings,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(settings: RemoteSettings) -> Self {
        let agent = settings.agent();
        HttpTransport { settings, agent }
    }

    pub fn request_body(&self, request: &ChatRequest) -> Value {
        let mut body = json!({
            "model": self.settings.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if request.structured {
            body["response_format"] = json!({"type": "json_object"});
        }
        body
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

/// Extract the first choice's content from a chat-completion response body.
pub fn parse_completion(body: Value) -> Result<ChatReply, TransportError> {
    let parsed: CompletionResponse = serde_json::from_value(body)
        .map_err(|e| TransportError::Unavailable(format!("malformed completion response: {e}")))?;
    let content = parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| TransportError::Unavailable("completion response has no content".into()))?;
    Ok(ChatReply {
        content,
        usage: parsed.usage.map(|u| Usage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
        }),
    })
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<ChatReply, TransportError> {
        let body = self.request_body(request);
        let response = self.settings.post(&self.agent, "chat/completions", &body)?;
        parse_completion(response)
    }
}

/// Embedding provider speaking the `/embeddings` wire format.
pub struct HttpEmbedder {
    settings: RemoteSettings,
    agent: ureq::Agent,
    dimension: usize,
}

impl HttpEmbedder {
    pub fn new(settings: RemoteSettings, dimension: usize) -> Self {
        let agent = settings.agent();
        HttpEmbedder {
            settings,
            agent,
            dimension,
        }
    }
}

impl Embedder for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let body = json!({"model": self.settings.embedding_model, "input": text});
        let response = self
            .settings
            .post(&self.agent, "embeddings", &body)
            .map_err(|e| GatewayError::Embedding(e.to_string()))?;
        let raw: Vec<f64> = response["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| GatewayError::Embedding("response has no data[0].embedding".into()))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| GatewayError::Embedding("non-numeric component".into())))
            .collect::<Result<_, _>>()?;
        if raw.len() != self.dimension {
            return Err(GatewayError::Embedding(format!(
                "expected dimension {}, provider returned {}",
                self.dimension,
                raw.len()
            )));
        }
        normalize(raw).ok_or_else(|| GatewayError::Embedding("zero embedding".into()))
    }
}
