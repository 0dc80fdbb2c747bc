//! Narrative and plan corpora: JSONL persistence and dataset statistics.
//!
//! One JSON object per line. Plans are stored as their canonical indented
//! text inside the record, so corpus files stay human-diffable and the text
//! format remains the authority.

use std::collections::BTreeSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::EmbeddingVector;
use crate::plan_tree::{parse_plan, serialize_plan, PlanTree};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { id: String, line: usize },
    #[error("empty corpus")]
    EmptyCorpus,
}

/// One source narrative: the premise/topic that conditions generation and
/// the full text plans are extracted from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NarrativeRecord {
    pub id: String,
    pub topic: String,
    pub text: String,
    pub genre: Option<String>,
    /// Unicode-whitespace token count of `text`; recomputed on load and
    /// checked against the stored value when one is present.
    pub word_count: usize,
}

impl NarrativeRecord {
    pub fn new(
        id: impl Into<String>,
        topic: impl Into<String>,
        text: impl Into<String>,
        genre: Option<String>,
    ) -> Self {
        let text = text.into();
        let word_count = count_words(&text);
        NarrativeRecord {
            id: id.into(),
            topic: topic.into(),
            text,
            genre,
            word_count,
        }
    }
}

pub fn count_words(text: &str) -> usize {
    text.split_whitespace().count()
}

/// One extracted plan, with the learning stage's optional annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanRecord {
    pub narrative_id: String,
    pub topic: String,
    pub plan: PlanTree,
    pub characteristics: Option<String>,
    pub embedding: Option<EmbeddingVector>,
}

pub type NarrativeCorpus = Vec<NarrativeRecord>;
pub type PlanCorpus = Vec<PlanRecord>;

#[derive(Debug, Serialize, Deserialize)]
struct WireNarrative {
    id: String,
    topic: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    genre: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    word_count: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WirePlan {
    narrative_id: String,
    topic: String,
    plan_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    characteristics: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding_model: Option<String>,
}

fn jsonl_lines(path: &Path) -> Result<Vec<(usize, String)>, CorpusError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        lines.push((idx + 1, line));
    }
    Ok(lines)
}

pub fn load_narratives(path: &Path) -> Result<NarrativeCorpus, CorpusError> {
    let mut corpus = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, raw) in jsonl_lines(path)? {
        let wire: WireNarrative = serde_json::from_str(&raw).map_err(|e| CorpusError::Schema {
            line,
            message: e.to_string(),
        })?;
        if wire.text.trim().is_empty() {
            return Err(CorpusError::Schema {
                line,
                message: "field `text` is empty".into(),
            });
        }
        if !seen.insert(wire.id.clone()) {
            return Err(CorpusError::DuplicateId { id: wire.id, line });
        }
        let computed = count_words(&wire.text);
        if let Some(stored) = wire.word_count {
            if stored != computed {
                return Err(CorpusError::Schema {
                    line,
                    message: format!("word_count mismatch: stored {stored}, computed {computed}"),
                });
            }
        }
        corpus.push(NarrativeRecord {
            id: wire.id,
            topic: wire.topic,
            text: wire.text,
            genre: wire.genre,
            word_count: computed,
        });
    }
    Ok(corpus)
}

pub fn save_narratives(corpus: &[NarrativeRecord], path: &Path) -> Result<(), CorpusError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for record in corpus {
        let wire = WireNarrative {
            id: record.id.clone(),
            topic: record.topic.clone(),
            text: record.text.clone(),
            genre: record.genre.clone(),
            word_count: Some(record.word_count),
        };
        writeln!(out, "{}", serde_json::to_string(&wire).expect("record serializes"))?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_plans(path: &Path) -> Result<PlanCorpus, CorpusError> {
    let mut corpus = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, raw) in jsonl_lines(path)? {
        let wire: WirePlan = serde_json::from_str(&raw).map_err(|e| CorpusError::Schema {
            line,
            message: e.to_string(),
        })?;
        if !seen.insert(wire.narrative_id.clone()) {
            return Err(CorpusError::DuplicateId {
                id: wire.narrative_id,
                line,
            });
        }
        let plan = parse_plan(&wire.plan_text)
            .map_err(|e| CorpusError::Schema {
                line,
                message: format!("plan_text: {e}"),
            })?
            .with_source_id(wire.narrative_id.clone());
        let embedding = wire.embedding.map(|values| EmbeddingVector {
            values,
            model_id: wire.embedding_model.unwrap_or_default(),
        });
        corpus.push(PlanRecord {
            narrative_id: wire.narrative_id,
            topic: wire.topic,
            plan,
            characteristics: wire.characteristics,
            embedding,
        });
    }
    Ok(corpus)
}

pub fn save_plans(corpus: &[PlanRecord], path: &Path) -> Result<(), CorpusError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for record in corpus {
        let wire = WirePlan {
            narrative_id: record.narrative_id.clone(),
            topic: record.topic.clone(),
            plan_text: serialize_plan(&record.plan),
            characteristics: record.characteristics.clone(),
            embedding: record.embedding.as_ref().map(|e| e.values.clone()),
            embedding_model: record
                .embedding
                .as_ref()
                .map(|e| e.model_id.clone())
                .filter(|m| !m.is_empty()),
        };
        writeln!(out, "{}", serde_json::to_string(&wire).expect("record serializes"))?;
    }
    out.flush()?;
    Ok(())
}

/// Dataset shape: split sizes plus word-length statistics of the training
/// narratives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub train_size: usize,
    pub test_size: usize,
    pub avg_length: f64,
    pub max_length: usize,
}

pub fn stats(train: &[NarrativeRecord], test: &[NarrativeRecord]) -> Result<CorpusStats, CorpusError> {
    if train.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let total: usize = train.iter().map(|r| r.word_count).sum();
    let max_length = train.iter().map(|r| r.word_count).max().unwrap_or(0);
    Ok(CorpusStats {
        train_size: train.len(),
        test_size: test.len(),
        avg_length: total as f64 / train.len() as f64,
        max_length,
    })
}
