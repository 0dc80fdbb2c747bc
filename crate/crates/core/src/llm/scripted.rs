//! Deterministic scripted backend: canned responses keyed by request
//! fingerprint. In replay-only mode a miss is an error, never a live call,
//! which is what keeps the test suite fully offline.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::template::TemplateRegistry;
use super::{approx_tokens, Backend, BackendError, ChatRequest, ChatResponse, Fingerprint, Usage};
use crate::llm::templates;

/// One line of a session file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SessionEntry {
    fingerprint: String,
    template_id: String,
    response_text: String,
}

/// An ordered fingerprint → response map, with JSONL persistence.
#[derive(Debug, Clone, Default)]
pub struct ScriptedSession {
    entries: BTreeMap<String, String>,
}

impl ScriptedSession {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert_raw(&mut self, fingerprint: &Fingerprint, response: impl Into<String>) {
        self.entries.insert(fingerprint.to_string(), response.into());
    }

    /// Merges another session's entries (theirs win on collision).
    pub fn extend(&mut self, other: ScriptedSession) {
        self.entries.extend(other.entries);
    }

    pub fn get(&self, fingerprint: &Fingerprint) -> Option<&str> {
        self.entries.get(&fingerprint.to_string()).map(String::as_str)
    }

    /// Stubs the response for a chat request by rendering it exactly the way
    /// the client will.
    pub fn stub(
        &mut self,
        templates: &TemplateRegistry,
        request: &ChatRequest,
        response: impl Into<String>,
    ) -> Result<(), super::TemplateError> {
        let prompt = templates.render(&request.template_id, &request.variables)?;
        let fingerprint = Fingerprint::compute(&request.template_id, &prompt);
        self.insert_raw(&fingerprint, response);
        Ok(())
    }

    /// Stubs the embedding returned for one exact input text.
    pub fn stub_embedding(&mut self, text: &str, values: &[f64]) {
        let fingerprint = Fingerprint::compute(templates::EMBEDDING, text);
        let json = serde_json::to_string(values).expect("float array serializes");
        self.insert_raw(&fingerprint, json);
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut session = ScriptedSession::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: SessionEntry = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("session line {}: {e}", lineno + 1),
                )
            })?;
            session.entries.insert(entry.fingerprint, entry.response_text);
        }
        Ok(session)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut file = std::fs::File::create(path)?;
        for (fingerprint, response_text) in &self.entries {
            let template_id = fingerprint
                .rsplit_once(':')
                .map(|(id, _)| id.to_string())
                .unwrap_or_default();
            let entry = SessionEntry {
                fingerprint: fingerprint.clone(),
                template_id,
                response_text: response_text.clone(),
            };
            writeln!(file, "{}", serde_json::to_string(&entry).expect("entry serializes"))?;
        }
        Ok(())
    }
}

enum Mode {
    ReplayOnly,
    /// Misses go to the inner backend and are recorded (optionally appended
    /// to a session file) so the next run replays.
    RecordThenReplay {
        inner: Box<dyn Backend>,
        record_path: Option<PathBuf>,
    },
}

pub struct ScriptedBackend {
    session: Mutex<ScriptedSession>,
    mode: Mode,
}

impl ScriptedBackend {
    pub fn replay_only(session: ScriptedSession) -> Self {
        ScriptedBackend {
            session: Mutex::new(session),
            mode: Mode::ReplayOnly,
        }
    }

    pub fn record_then_replay(
        session: ScriptedSession,
        inner: Box<dyn Backend>,
        record_path: Option<PathBuf>,
    ) -> Self {
        ScriptedBackend {
            session: Mutex::new(session),
            mode: Mode::RecordThenReplay { inner, record_path },
        }
    }

    fn record(&self, fingerprint: &Fingerprint, response: &str, record_path: Option<&Path>) {
        let mut session = self.session.lock().expect("session lock");
        session.insert_raw(fingerprint, response);
        if let Some(path) = record_path {
            let entry = SessionEntry {
                fingerprint: fingerprint.to_string(),
                template_id: fingerprint.template_id.clone(),
                response_text: response.to_string(),
            };
            let appended = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .and_then(|mut f| {
                    writeln!(f, "{}", serde_json::to_string(&entry).expect("entry serializes"))
                });
            if let Err(e) = appended {
                log::warn!("failed to append scripted recording to {}: {e}", path.display());
            }
        }
    }

    fn scripted_response(text: String) -> ChatResponse {
        ChatResponse {
            usage: Usage {
                prompt_tokens: 0,
                completion_tokens: approx_tokens(&text),
            },
            provider_meta: serde_json::json!({"backend": "scripted"}),
            text,
        }
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn chat(
        &self,
        fingerprint: &Fingerprint,
        prompt: &str,
        request: &ChatRequest,
    ) -> Result<ChatResponse, BackendError> {
        let hit = {
            let session = self.session.lock().expect("session lock");
            session.get(fingerprint).map(str::to_string)
        };
        if let Some(text) = hit {
            return Ok(Self::scripted_response(text));
        }
        match &self.mode {
            Mode::ReplayOnly => Err(BackendError::ReplayMiss {
                fingerprint: fingerprint.to_string(),
            }),
            Mode::RecordThenReplay { inner, record_path } => {
                let response = inner.chat(fingerprint, prompt, request)?;
                self.record(fingerprint, &response.text, record_path.as_deref());
                Ok(response)
            }
        }
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let mut out = Vec::with_capacity(texts.len());
        for text in texts {
            let fingerprint = Fingerprint::compute(templates::EMBEDDING, text);
            let hit = {
                let session = self.session.lock().expect("session lock");
                session.get(&fingerprint).map(str::to_string)
            };
            let json = match hit {
                Some(json) => json,
                None => match &self.mode {
                    Mode::ReplayOnly => {
                        return Err(BackendError::ReplayMiss {
                            fingerprint: fingerprint.to_string(),
                        })
                    }
                    Mode::RecordThenReplay { inner, record_path } => {
                        let values = inner.embed(std::slice::from_ref(text))?;
                        let json = serde_json::to_string(&values[0])
                            .expect("float array serializes");
                        self.record(&fingerprint, &json, record_path.as_deref());
                        json
                    }
                },
            };
            let values: Vec<f64> = serde_json::from_str(&json).map_err(|e| {
                BackendError::Fatal(format!("scripted embedding for {fingerprint} is not a float array: {e}"))
            })?;
            out.push(values);
        }
        Ok(out)
    }

    fn embed_model_id(&self) -> String {
        "scripted-embed".into()
    }
}
