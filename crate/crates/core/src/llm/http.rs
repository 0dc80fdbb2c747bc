//! Live chat/embedding provider speaking the OpenAI-compatible JSON schema:
//! `POST {base_url}/chat/completions` and `POST {base_url}/embeddings` with a
//! bearer token. Timeouts, 429s, and 5xx responses are transient; everything
//! else is fatal.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{approx_tokens, Backend, BackendError, ChatRequest, ChatResponse, Fingerprint, Usage};

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub chat_model: String,
    pub embed_model: String,
    pub api_key: String,
    pub timeout_secs: u64,
}

impl HttpConfig {
    pub fn new(base_url: &str, chat_model: &str, embed_model: &str, api_key: &str) -> Self {
        HttpConfig {
            base_url: base_url.trim_end_matches('/').to_string(),
            chat_model: chat_model.to_string(),
            embed_model: embed_model.to_string(),
            api_key: api_key.to_string(),
            timeout_secs: 120,
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ChatCompletion {
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
    content: String,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
}

#[derive(Deserialize)]
struct EmbeddingList {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Fatal(format!("http client: {e}")))?;
        Ok(HttpBackend { config, client })
    }

    /// JSON body for one chat call; separated out so it can be checked
    /// without a network.
    pub fn chat_body(&self, prompt: &str, request: &ChatRequest) -> serde_json::Value {
        json!({
            "model": self.config.chat_model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        })
    }

    pub fn embed_body(&self, texts: &[String]) -> serde_json::Value {
        json!({
            "model": self.config.embed_model,
            "input": texts,
        })
    }

    fn post(&self, path: &str, body: &serde_json::Value) -> Result<serde_json::Value, BackendError> {
        let url = format!("{}{path}", self.config.base_url);
        let response = self
            .client
            .post(&url)
            .bearer_auth(&self.config.api_key)
            .json(body)
            .send()
            .map_err(|e| {
                if e.is_timeout() || e.is_connect() {
                    BackendError::Transient(format!("{url}: {e}"))
                } else {
                    BackendError::Fatal(format!("{url}: {e}"))
                }
            })?;

        let status = response.status();
        let text = response
            .text()
            .map_err(|e| BackendError::Transient(format!("{url}: reading body: {e}")))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("{url}: HTTP {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::Fatal(format!("{url}: HTTP {status}: {text}")));
        }
        serde_json::from_str(&text)
            .map_err(|e| BackendError::Fatal(format!("{url}: malformed response: {e}")))
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn chat(
        &self,
        _fingerprint: &Fingerprint,
        prompt: &str,
        request: &ChatRequest,
    ) -> Result<ChatResponse, BackendError> {
        let body = self.chat_body(prompt, request);
        let value = self.post("/chat/completions", &body)?;
        let parsed: ChatCompletion = serde_json::from_value(value.clone())
            .map_err(|e| BackendError::Fatal(format!("chat completion schema: {e}")))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::Fatal("chat completion had no choices".into()))?;
        let usage = parsed
            .usage
            .map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            })
            .unwrap_or(Usage {
                prompt_tokens: approx_tokens(prompt),
                completion_tokens: approx_tokens(&text),
            });
        Ok(ChatResponse {
            text,
            usage,
            provider_meta: value,
        })
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let body = self.embed_body(texts);
        let value = self.post("/embeddings", &body)?;
        let parsed: EmbeddingList = serde_json::from_value(value)
            .map_err(|e| BackendError::Fatal(format!("embedding schema: {e}")))?;
        if parsed.data.len() != texts.len() {
            return Err(BackendError::Fatal(format!(
                "embedding count mismatch: sent {}, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }

    fn embed_model_id(&self) -> String {
        self.config.embed_model.clone()
    }
}
