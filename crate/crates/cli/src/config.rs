//! TOML run configuration. Every key is optional and documented with its
//! default; unknown keys are rejected so typos fail loudly.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

use eipe_core::extraction::{ExtractionConfig, RefinementMode};
use eipe_core::generation::GenerationConfig;
use eipe_core::llm::LlmConfig;
use eipe_core::planner::{EmbeddingSource, PlannerConfig, PlannerMode};
use eipe_core::qa::QaConfig;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// "live" or "scripted" (default: scripted).
    pub provider: Option<String>,
    /// Scripted session file for replay.
    pub script: Option<PathBuf>,
    /// Session file new live responses are appended to (live provider only).
    pub record: Option<PathBuf>,
    /// Base seed for clustering and judging (default: 0).
    pub seed: Option<u64>,
    #[serde(default)]
    pub llm: LlmSection,
    #[serde(default)]
    pub extraction: ExtractionSection,
    #[serde(default)]
    pub qa: QaSection,
    #[serde(default)]
    pub planner: PlannerSection,
    #[serde(default)]
    pub generation: GenerationSection,
    #[serde(default)]
    pub judge: JudgeSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmSection {
    /// Default: https://api.openai.com/v1
    pub base_url: Option<String>,
    /// Default: gpt-4
    pub chat_model: Option<String>,
    /// Default: text-embedding-ada-002
    pub embed_model: Option<String>,
    /// Default: 3
    pub max_retries: Option<u32>,
    /// Default: 200
    pub retry_base_ms: Option<u64>,
    /// Default: 4
    pub max_in_flight: Option<usize>,
    /// Overrides the 0.0 default on evaluation/grading calls.
    pub temperature_evaluation: Option<f32>,
    /// Overrides the 0.7 default on sketching/generation calls.
    pub temperature_generation: Option<f32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionSection {
    /// Default: 1.0
    pub pass_threshold: Option<f64>,
    /// Default: 8
    pub max_iterations: Option<usize>,
    /// "structured" (default) or "llm_rewrite"
    pub mode: Option<String>,
    /// Default: 4
    pub workers: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaSection {
    /// Default: 100
    pub words_per_question: Option<usize>,
    /// Default: 5
    pub min_questions: Option<usize>,
    /// Default: 60
    pub max_questions: Option<usize>,
    /// Default: 2
    pub generation_retries: Option<usize>,
    /// Default: 3000
    pub excerpt_word_budget: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerSection {
    /// Default: 20
    pub k: Option<usize>,
    /// Default: k
    pub n_shots: Option<usize>,
    /// Genre word substituted into the characteristics prompt
    /// (default: narrative).
    pub genre: Option<String>,
    /// "characteristics" (default) or "plan_text"
    pub embedding_source: Option<String>,
    /// Default: 6000
    pub demo_word_budget: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSection {
    /// Default: 4500
    pub word_budget: Option<usize>,
    /// Default: 350
    pub step_words: Option<usize>,
    /// Default: 3
    pub retrieval_top_k: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeSection {
    /// Default: 3
    pub votes: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn llm_config(&self) -> LlmConfig {
        let defaults = LlmConfig::default();
        LlmConfig {
            max_retries: self.llm.max_retries.unwrap_or(defaults.max_retries),
            retry_base_ms: self.llm.retry_base_ms.unwrap_or(defaults.retry_base_ms),
            max_in_flight: self.llm.max_in_flight.unwrap_or(defaults.max_in_flight),
            temperature_evaluation: self.llm.temperature_evaluation,
            temperature_generation: self.llm.temperature_generation,
        }
    }

    pub fn qa_config(&self) -> QaConfig {
        let defaults = QaConfig::default();
        QaConfig {
            words_per_question: self.qa.words_per_question.unwrap_or(defaults.words_per_question),
            min_questions: self.qa.min_questions.unwrap_or(defaults.min_questions),
            max_questions: self.qa.max_questions.unwrap_or(defaults.max_questions),
            generation_retries: self.qa.generation_retries.unwrap_or(defaults.generation_retries),
            excerpt_word_budget: self
                .qa
                .excerpt_word_budget
                .unwrap_or(defaults.excerpt_word_budget),
        }
    }

    pub fn extraction_config(&self) -> anyhow::Result<ExtractionConfig> {
        let defaults = ExtractionConfig::default();
        let mode = match self.extraction.mode.as_deref() {
            None => defaults.refinement_mode,
            Some("structured") => RefinementMode::Structured,
            Some("llm_rewrite") | Some("llm") => RefinementMode::LlmRewrite,
            Some(other) => anyhow::bail!("unknown extraction mode `{other}`"),
        };
        Ok(ExtractionConfig {
            pass_threshold: self.extraction.pass_threshold.unwrap_or(defaults.pass_threshold),
            max_iterations: self.extraction.max_iterations.unwrap_or(defaults.max_iterations),
            refinement_mode: mode,
            qa: self.qa_config(),
            workers: self.extraction.workers.unwrap_or(defaults.workers),
        })
    }

    pub fn planner_config(&self, seed: u64) -> anyhow::Result<PlannerConfig> {
        let defaults = PlannerConfig::default();
        let k = self.planner.k.unwrap_or(defaults.k);
        let embedding_source = match self.planner.embedding_source.as_deref() {
            None => defaults.embedding_source,
            Some("characteristics") => EmbeddingSource::Characteristics,
            Some("plan_text") => EmbeddingSource::PlanText,
            Some(other) => anyhow::bail!("unknown embedding source `{other}`"),
        };
        Ok(PlannerConfig {
            mode: PlannerMode::Cluster,
            k,
            n_shots: self.planner.n_shots.unwrap_or(k),
            seed,
            embedding_source,
            demo_word_budget: self
                .planner
                .demo_word_budget
                .unwrap_or(defaults.demo_word_budget),
        })
    }

    pub fn generation_config(&self) -> GenerationConfig {
        let defaults = GenerationConfig::default();
        GenerationConfig {
            word_budget: self.generation.word_budget.unwrap_or(defaults.word_budget),
            step_words: self.generation.step_words.unwrap_or(defaults.step_words),
            retrieval_top_k: self
                .generation
                .retrieval_top_k
                .unwrap_or(defaults.retrieval_top_k),
        }
    }

    pub fn genre(&self) -> String {
        self.planner.genre.clone().unwrap_or_else(|| "narrative".to_string())
    }

    pub fn votes(&self) -> usize {
        self.judge.votes.unwrap_or(3)
    }
}
