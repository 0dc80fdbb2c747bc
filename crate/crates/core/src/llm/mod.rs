//! Provider-agnostic chat and embedding client.
//!
//! Every other module reaches the network (or the scripted replay store)
//! exclusively through [`LlmClient`]: it renders a named template, derives a
//! stable request fingerprint, bounds in-flight calls with a semaphore, and
//! retries transient transport failures with exponential backoff.

mod http;
mod scripted;
mod template;

pub use http::{HttpBackend, HttpConfig};
pub use scripted::{ScriptedBackend, ScriptedSession};
pub use template::{ids as templates, TemplateError, TemplateRegistry};

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{fnv1a_64, Semaphore};

/// Default temperature for evaluation and grading calls.
pub const TEMP_EVALUATION: f32 = 0.0;
/// Default temperature for sketching and generation calls.
pub const TEMP_GENERATION: f32 = 0.7;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { message: String, attempts: u32 },
    #[error("scripted replay miss for {fingerprint}")]
    ReplayMiss { fingerprint: String },
    #[error("embedding request needs at least one text")]
    EmptyEmbedBatch,
    #[error("embedding batch has inconsistent dimensions")]
    DimensionMismatch,
}

/// A chat call: which template, its variable bindings, and decode settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub template_id: String,
    pub variables: BTreeMap<String, String>,
    pub temperature: f32,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(template_id: &str) -> Self {
        ChatRequest {
            template_id: template_id.to_string(),
            variables: BTreeMap::new(),
            temperature: TEMP_EVALUATION,
            max_tokens: 2048,
        }
    }

    pub fn var(mut self, name: &str, value: impl Into<String>) -> Self {
        self.variables.insert(name.to_string(), value.into());
        self
    }

    pub fn temperature(mut self, temperature: f32) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    pub provider_meta: serde_json::Value,
}

/// Identifies a request by template id plus a stable 64-bit hash of the
/// rendered prompt. Temperature is deliberately excluded so replay keys on
/// semantic content.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    pub template_id: String,
    pub hash: u64,
}

impl Fingerprint {
    pub fn compute(template_id: &str, rendered_prompt: &str) -> Self {
        Fingerprint {
            template_id: template_id.to_string(),
            hash: fnv1a_64(rendered_prompt.as_bytes()),
        }
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:016x}", self.template_id, self.hash)
    }
}

/// Fixed-dimension text embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model_id: String,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Unit-norm copy, or `None` for the zero vector.
    pub fn normalized(&self) -> Option<EmbeddingVector> {
        let norm = self.norm();
        if norm == 0.0 {
            return None;
        }
        Some(EmbeddingVector {
            values: self.values.iter().map(|v| v / norm).collect(),
            model_id: self.model_id.clone(),
        })
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            return 0.0;
        }
        let dot: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum();
        dot / denom
    }
}

/// Transport-level failure. Transient errors are retried by the client.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("{0}")]
    Fatal(String),
    #[error("no scripted response for {fingerprint}")]
    ReplayMiss { fingerprint: String },
}

/// A chat/embedding provider. Implementations must be shareable across
/// threads; the client serializes nothing beyond its in-flight bound.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn chat(
        &self,
        fingerprint: &Fingerprint,
        prompt: &str,
        request: &ChatRequest,
    ) -> Result<ChatResponse, BackendError>;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
    fn embed_model_id(&self) -> String;
}

#[derive(Debug, Clone)]
pub struct LlmConfig {
    /// Extra attempts after the first, for transient failures only.
    pub max_retries: u32,
    pub retry_base_ms: u64,
    pub max_in_flight: usize,
    /// Replaces the default evaluation temperature (0.0) on every request
    /// that uses it. Fingerprints exclude temperature, so replay is
    /// unaffected.
    pub temperature_evaluation: Option<f32>,
    /// Replaces the default generation temperature (0.7) likewise.
    pub temperature_generation: Option<f32>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            max_retries: 3,
            retry_base_ms: 200,
            max_in_flight: 4,
            temperature_evaluation: None,
            temperature_generation: None,
        }
    }
}

pub struct LlmClient {
    templates: TemplateRegistry,
    backend: Box<dyn Backend>,
    config: LlmConfig,
    permits: Semaphore,
}

impl LlmClient {
    pub fn new(backend: Box<dyn Backend>, templates: TemplateRegistry, config: LlmConfig) -> Self {
        let permits = Semaphore::new(config.max_in_flight);
        LlmClient {
            templates,
            backend,
            config,
            permits,
        }
    }

    /// Client over a replay-only scripted session, as used by tests and the
    /// CLI's scripted provider. Never touches the network.
    pub fn scripted(session: ScriptedSession) -> Self {
        LlmClient::new(
            Box::new(ScriptedBackend::replay_only(session)),
            TemplateRegistry::builtin(),
            LlmConfig {
                retry_base_ms: 0,
                ..LlmConfig::default()
            },
        )
    }

    pub fn templates(&self) -> &TemplateRegistry {
        &self.templates
    }

    pub fn max_in_flight(&self) -> usize {
        self.config.max_in_flight
    }

    pub fn render(&self, request: &ChatRequest) -> Result<String, LlmError> {
        Ok(self.templates.render(&request.template_id, &request.variables)?)
    }

    fn effective_temperature(&self, request: &ChatRequest) -> f32 {
        if request.temperature == TEMP_EVALUATION {
            self.config.temperature_evaluation.unwrap_or(request.temperature)
        } else if request.temperature == TEMP_GENERATION {
            self.config.temperature_generation.unwrap_or(request.temperature)
        } else {
            request.temperature
        }
    }

    /// Renders, fingerprints, and sends one chat request, retrying transient
    /// transport failures with exponential backoff.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let prompt = self.render(request)?;
        let fingerprint = Fingerprint::compute(&request.template_id, &prompt);
        let request = ChatRequest {
            temperature: self.effective_temperature(request),
            ..request.clone()
        };
        let _permit = self.permits.acquire();

        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.backend.chat(&fingerprint, &prompt, &request) {
                Ok(response) => return Ok(response),
                Err(BackendError::Transient(message)) if attempt <= self.config.max_retries => {
                    let delay = self.config.retry_base_ms << (attempt - 1).min(8);
                    log::info!(
                        "transient {} failure (attempt {attempt}): {message}; retrying in {delay}ms",
                        self.backend.name()
                    );
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                }
                Err(BackendError::Transient(message)) => {
                    return Err(LlmError::Transport { message, attempts: attempt });
                }
                Err(BackendError::Fatal(message)) => {
                    return Err(LlmError::Transport { message, attempts: attempt });
                }
                Err(BackendError::ReplayMiss { fingerprint }) => {
                    return Err(LlmError::ReplayMiss { fingerprint });
                }
            }
        }
    }

    /// Embeds a nonempty batch, preserving order and checking that all
    /// returned vectors share a dimension.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LlmError> {
        if texts.is_empty() {
            return Err(LlmError::EmptyEmbedBatch);
        }
        let _permit = self.permits.acquire();

        let mut attempt = 0;
        let values = loop {
            attempt += 1;
            match self.backend.embed(texts) {
                Ok(values) => break values,
                Err(BackendError::Transient(message)) if attempt <= self.config.max_retries => {
                    let delay = self.config.retry_base_ms << (attempt - 1).min(8);
                    log::info!(
                        "transient {} embed failure (attempt {attempt}): {message}",
                        self.backend.name()
                    );
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                }
                Err(BackendError::Transient(message)) | Err(BackendError::Fatal(message)) => {
                    return Err(LlmError::Transport { message, attempts: attempt });
                }
                Err(BackendError::ReplayMiss { fingerprint }) => {
                    return Err(LlmError::ReplayMiss { fingerprint });
                }
            }
        };

        debug_assert_eq!(values.len(), texts.len());
        let model_id = self.backend.embed_model_id();
        let dim = values.first().map(Vec::len).unwrap_or(0);
        if values.iter().any(|v| v.len() != dim) {
            return Err(LlmError::DimensionMismatch);
        }
        Ok(values
            .into_iter()
            .map(|values| EmbeddingVector {
                values,
                model_id: model_id.clone(),
            })
            .collect())
    }

    /// Embeds a single text.
    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        Ok(self.embed(&[text.to_string()])?.remove(0))
    }
}

/// Rough whitespace-token count used for usage estimates where the provider
/// reports none.
pub(crate) fn approx_tokens(text: &str) -> u32 {
    text.split_whitespace().count() as u32
}
