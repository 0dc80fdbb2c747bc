//! Plan-conditioned recurrent writer. The plan acts as persistent memory:
//! a cursor walks its leaves in depth-first order, one written paragraph per
//! leaf, while a rolling short-term summary and semantic retrieval over
//! accumulated step summaries keep earlier context in reach.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::count_words;
use crate::llm::{templates, ChatRequest, EmbeddingVector, LlmClient, LlmError, TEMP_GENERATION};
use crate::plan_tree::{resolve, serialize_plan, NodePath, PlanTree};

/// Instruction carried once the cursor moves past the last leaf.
pub const CONCLUDE_SENTINEL: &str = "conclude";

#[derive(Debug, Error)]
pub enum GenError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("step output missing required sections after one retry")]
    MalformedStepOutput { raw: String },
    #[error("every plan leaf is already covered")]
    Exhausted,
}

/// A step failure carrying whatever was written before it.
#[derive(Debug)]
pub struct WriteFailure {
    pub error: GenError,
    pub partial_narrative: String,
    pub log: Vec<StepLogEntry>,
}

#[derive(Debug, Clone)]
pub struct GenerationConfig {
    /// Total words to aim for across the narrative.
    pub word_budget: usize,
    /// Per-step paragraph target, passed to the prompt.
    pub step_words: usize,
    pub retrieval_top_k: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            word_budget: 4500,
            step_words: 350,
            retrieval_top_k: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub summary: String,
    pub embedding: EmbeddingVector,
}

/// Writer progress: the plan, the leaf cursor, and the three memories
/// (short-term summary, long-term retrievable store, last paragraph).
#[derive(Debug, Clone)]
pub struct WriterState {
    pub plan: PlanTree,
    pub cursor: usize,
    pub short_term: String,
    pub memory: Vec<MemoryEntry>,
    pub last_paragraph: String,
    pub next_instruction: String,
    pub words_written: usize,
    leaf_paths: Vec<NodePath>,
}

impl WriterState {
    pub fn leaf_paths(&self) -> &[NodePath] {
        &self.leaf_paths
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_paths.len()
    }

    fn leaf_content(&self, index: usize) -> &str {
        resolve(&self.plan, &self.leaf_paths[index])
            .expect("leaf paths enumerate the plan")
            .content()
    }
}

/// Fresh state at the first leaf; the initial instruction is that leaf's
/// content.
pub fn init_state(plan: &PlanTree) -> WriterState {
    let leaf_paths = plan.leaf_paths();
    let mut state = WriterState {
        plan: plan.clone(),
        cursor: 0,
        short_term: String::new(),
        memory: Vec::new(),
        last_paragraph: String::new(),
        next_instruction: String::new(),
        words_written: 0,
        leaf_paths,
    };
    state.next_instruction = state.leaf_content(0).to_string();
    state
}

/// Top-`k` stored summaries by cosine similarity to the query, most similar
/// first; ties keep insertion order. An empty memory needs no embedding
/// call.
pub fn retrieve_memory(
    state: &WriterState,
    query: &str,
    top_k: usize,
    client: &LlmClient,
) -> Result<Vec<MemoryEntry>, GenError> {
    if state.memory.is_empty() || top_k == 0 {
        return Ok(Vec::new());
    }
    let query_vec = client.embed_one(query)?;
    let mut scored: Vec<(usize, f64)> = state
        .memory
        .iter()
        .enumerate()
        .map(|(i, entry)| (i, query_vec.cosine(&entry.embedding)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(top_k)
        .map(|(i, _)| state.memory[i].clone())
        .collect())
}

fn or_none(text: &str) -> String {
    if text.trim().is_empty() {
        "(none)".to_string()
    } else {
        text.to_string()
    }
}

pub fn step_request(
    state: &WriterState,
    retrieved: &[MemoryEntry],
    config: &GenerationConfig,
    retry_notice: &str,
) -> ChatRequest {
    let memories = if retrieved.is_empty() {
        "(none)".to_string()
    } else {
        retrieved
            .iter()
            .map(|m| format!("- {}", m.summary))
            .collect::<Vec<_>>()
            .join("\n")
    };
    ChatRequest::new(templates::WRITER_STEP)
        .var("plan", serialize_plan(&state.plan))
        .var("leaf", state.leaf_content(state.cursor))
        .var("instruction", or_none(&state.next_instruction))
        .var("short_term", or_none(&state.short_term))
        .var("memories", memories)
        .var("last_paragraph", or_none(&state.last_paragraph))
        .var("retry_notice", retry_notice)
        .var("step_words", config.step_words.to_string())
        .temperature(TEMP_GENERATION)
        .max_tokens(2048)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutput {
    pub paragraph: String,
    pub next_instruction: String,
    pub summary: String,
}

/// Splits a reply on the three `===` section markers. The paragraph and
/// summary must be nonempty; the directive may be blank.
pub fn parse_step_output(text: &str) -> Option<StepOutput> {
    let after_paragraph = text.split("===PARAGRAPH===").nth(1)?;
    let (paragraph, rest) = after_paragraph.split_once("===NEXT_INSTRUCTION===")?;
    let (instruction, summary) = rest.split_once("===SUMMARY===")?;
    let paragraph = paragraph.trim();
    let summary = summary.trim();
    if paragraph.is_empty() || summary.is_empty() {
        return None;
    }
    Some(StepOutput {
        paragraph: paragraph.to_string(),
        next_instruction: instruction.trim().to_string(),
        summary: summary.to_string(),
    })
}

const RETRY_NOTICE: &str = "Your previous reply did not use the required sections. Reply again with exactly the three delimited sections.";

/// One writer step: prompt from the current leaf plus memories, parse the
/// three sections (retrying once on a malformed reply), then advance the
/// cursor and append the step summary to memory.
pub fn step(
    state: &WriterState,
    client: &LlmClient,
    config: &GenerationConfig,
) -> Result<(String, WriterState), GenError> {
    if state.cursor >= state.leaf_count() {
        return Err(GenError::Exhausted);
    }
    let leaf = state.leaf_content(state.cursor).to_string();
    let retrieved = retrieve_memory(state, &leaf, config.retrieval_top_k, client)?;

    let first = client.complete(&step_request(state, &retrieved, config, ""))?;
    let output = match parse_step_output(&first.text) {
        Some(output) => output,
        None => {
            log::warn!("malformed step output at leaf {}; retrying once", state.cursor);
            let second = client.complete(&step_request(state, &retrieved, config, RETRY_NOTICE))?;
            parse_step_output(&second.text).ok_or(GenError::MalformedStepOutput {
                raw: second.text,
            })?
        }
    };

    let summary_embedding = client.embed_one(&output.summary)?;
    let mut next = state.clone();
    next.cursor += 1;
    next.words_written += count_words(&output.paragraph);
    next.short_term = output.summary.clone();
    next.last_paragraph = output.paragraph.clone();
    next.memory.push(MemoryEntry {
        summary: output.summary,
        embedding: summary_embedding,
    });
    next.next_instruction = if next.cursor >= next.leaf_count() {
        CONCLUDE_SENTINEL.to_string()
    } else if output.next_instruction.is_empty() {
        next.leaf_content(next.cursor).to_string()
    } else {
        output.next_instruction
    };
    Ok((next.last_paragraph.clone(), next))
}

/// One line of the step log JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLogEntry {
    pub step: usize,
    pub leaf_path: NodePath,
    pub words: usize,
    pub summary: String,
}

/// Writes the whole narrative: steps through leaves until all are covered
/// or the word budget is reached, concatenating paragraphs with blank
/// lines. A failing step returns the partial narrative alongside the error.
pub fn write_narrative(
    plan: &PlanTree,
    client: &LlmClient,
    config: &GenerationConfig,
) -> Result<(String, Vec<StepLogEntry>), Box<WriteFailure>> {
    let mut state = init_state(plan);
    let mut paragraphs: Vec<String> = Vec::new();
    let mut log = Vec::new();

    while state.cursor < state.leaf_count() && state.words_written < config.word_budget {
        let leaf_path = state.leaf_paths[state.cursor].clone();
        match step(&state, client, config) {
            Ok((paragraph, next)) => {
                log.push(StepLogEntry {
                    step: log.len() + 1,
                    leaf_path,
                    words: count_words(&paragraph),
                    summary: next.short_term.clone(),
                });
                paragraphs.push(paragraph);
                state = next;
            }
            Err(error) => {
                return Err(Box::new(WriteFailure {
                    error,
                    partial_narrative: paragraphs.join("\n\n"),
                    log,
                }))
            }
        }
    }
    Ok((paragraphs.join("\n\n"), log))
}
