//! Learning stage: characteristics extraction, corpus embedding, k-means
//! clustering for demonstration selection, retrieval-based selection,
//! in-context plan generation, and fine-tuning dataset export.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PlanCorpus, PlanRecord};
use crate::llm::{templates, ChatRequest, LlmClient, LlmError, TEMP_EVALUATION, TEMP_GENERATION};
use crate::plan_tree::{parse_plan_lenient, serialize_plan, ParseOptions, PlanError, PlanTree};
use crate::util::parallel_map;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("need at least {need} vectors, have {have}")]
    TooFewVectors { have: usize, need: usize },
    #[error("vector dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("generated plan unparseable even after repair: {0}")]
    UnparseablePlan(PlanError),
    #[error("empty plan corpus")]
    EmptyCorpus,
    #[error("record `{narrative_id}` has no embedding")]
    MissingEmbedding { narrative_id: String },
    #[error("record `{narrative_id}` embedded to the zero vector")]
    ZeroVector { narrative_id: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A (topic, plan) exemplar shown in the in-context prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub topic: String,
    pub plan_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerMode {
    ZeroShot,
    Cluster,
    Retrieval,
}

/// What gets embedded for clustering/retrieval: model-written
/// characteristics of each plan (default), or the raw plan text (kept as an
/// ablation option; it clusters poorly because plan texts vary little).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Characteristics,
    PlanText,
}

#[derive(Debug, Clone)]
pub struct PlannerConfig {
    pub mode: PlannerMode,
    pub k: usize,
    pub n_shots: usize,
    pub seed: u64,
    pub embedding_source: EmbeddingSource,
    /// Demonstrations are dropped from the end of the list once their
    /// combined word count exceeds this.
    pub demo_word_budget: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            mode: PlannerMode::Cluster,
            k: 20,
            n_shots: 20,
            seed: 0,
            embedding_source: EmbeddingSource::Characteristics,
            demo_word_budget: 6000,
        }
    }
}

pub fn characteristics_request(plan_text: &str, genre: &str) -> ChatRequest {
    ChatRequest::new(templates::CHARACTERISTICS)
        .var("plan", plan_text)
        .var("genre", genre)
        .temperature(TEMP_EVALUATION)
        .max_tokens(512)
}

/// Asks the model for the distinctive characteristics of one plan.
pub fn extract_characteristics(
    record: &PlanRecord,
    genre: &str,
    client: &LlmClient,
) -> Result<String, PlannerError> {
    let plan_text = serialize_plan(&record.plan);
    let response = client.complete(&characteristics_request(&plan_text, genre))?;
    Ok(response.text.trim().to_string())
}

/// Fills in characteristics where missing, embeds every record, and stores
/// L2-normalized vectors on the corpus.
pub fn embed_plan_corpus(
    corpus: &mut PlanCorpus,
    genre: &str,
    client: &LlmClient,
    source: EmbeddingSource,
) -> Result<(), PlannerError> {
    if corpus.is_empty() {
        return Err(PlannerError::EmptyCorpus);
    }
    if source == EmbeddingSource::Characteristics {
        let missing: Vec<(usize, PlanRecord)> = corpus
            .iter()
            .enumerate()
            .filter(|(_, r)| r.characteristics.is_none())
            .map(|(i, r)| (i, r.clone()))
            .collect();
        let extracted = parallel_map(missing, client.max_in_flight(), |_, (i, record)| {
            extract_characteristics(&record, genre, client).map(|text| (i, text))
        });
        for result in extracted {
            let (i, text) = result?;
            corpus[i].characteristics = Some(text);
        }
    }

    let texts: Vec<String> = corpus
        .iter()
        .map(|r| match source {
            EmbeddingSource::Characteristics => {
                r.characteristics.clone().expect("filled in above")
            }
            EmbeddingSource::PlanText => serialize_plan(&r.plan),
        })
        .collect();
    let embeddings = client.embed(&texts)?;
    for (record, embedding) in corpus.iter_mut().zip(embeddings) {
        let normalized = embedding.normalized().ok_or_else(|| PlannerError::ZeroVector {
            narrative_id: record.narrative_id.clone(),
        })?;
        record.embedding = Some(normalized);
    }
    Ok(())
}

/// Result of one k-means run. `inertia_history` holds the inertia after
/// every assignment pass, which is non-increasing by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub inertia_history: Vec<f64>,
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_dimensions(vectors: &[Vec<f64>]) -> Result<usize, PlannerError> {
    let expected = vectors.first().map(Vec::len).unwrap_or(0);
    for v in vectors {
        if v.len() != expected {
            return Err(PlannerError::DimensionMismatch {
                expected,
                found: v.len(),
            });
        }
    }
    Ok(expected)
}

/// Greedy spread seeding: a seeded-random first centroid, then repeatedly
/// the point farthest from its nearest chosen centroid (ties to the lowest
/// index).
fn seed_centroids(vectors: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..vectors.len());
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = vectors
        .iter()
        .map(|v| dist_sq(v, &vectors[first]))
        .collect();
    while chosen.len() < k {
        let mut best = 0;
        let mut best_dist = f64::NEG_INFINITY;
        for (i, &d) in nearest.iter().enumerate() {
            if d > best_dist {
                best_dist = d;
                best = i;
            }
        }
        chosen.push(best);
        for (i, v) in vectors.iter().enumerate() {
            let d = dist_sq(v, &vectors[best]);
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
    }
    chosen.into_iter().map(|i| vectors[i].clone()).collect()
}

fn assign_nearest(vectors: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    vectors
        .iter()
        .map(|v| {
            let mut best = 0;
            let mut best_dist = f64::INFINITY;
            for (j, c) in centroids.iter().enumerate() {
                let d = dist_sq(v, c);
                if d < best_dist {
                    best_dist = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Re-seeds each empty cluster to the point currently farthest from its
/// centroid (among clusters that can spare a member). This only ever lowers
/// the inertia.
fn fix_empty_clusters(vectors: &[Vec<f64>], centroids: &mut [Vec<f64>], assignments: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut farthest = None;
        let mut farthest_dist = f64::NEG_INFINITY;
        for (i, v) in vectors.iter().enumerate() {
            if sizes[assignments[i]] < 2 {
                continue;
            }
            let d = dist_sq(v, &centroids[assignments[i]]);
            if d > farthest_dist {
                farthest_dist = d;
                farthest = Some(i);
            }
        }
        let Some(i) = farthest else {
            // every nonempty cluster is a singleton; nothing can move
            return;
        };
        centroids[empty] = vectors[i].clone();
        assignments[i] = empty;
    }
}

fn inertia_of(vectors: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    vectors
        .iter()
        .zip(assignments)
        .map(|(v, &a)| dist_sq(v, &centroids[a]))
        .sum()
}

/// Lloyd's algorithm from greedy spread seeding, deterministic given the
/// seed. Runs until the assignment fixpoint or 100 iterations.
pub fn kmeans(vectors: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel, PlannerError> {
    if k == 0 || vectors.len() < k {
        return Err(PlannerError::TooFewVectors {
            have: vectors.len(),
            need: k.max(1),
        });
    }
    check_dimensions(vectors)?;

    let mut centroids = seed_centroids(vectors, k, seed);
    let mut assignments: Option<Vec<usize>> = None;
    let mut history = Vec::new();

    for _ in 0..100 {
        let mut next = assign_nearest(vectors, &centroids);
        fix_empty_clusters(vectors, &mut centroids, &mut next);
        let inertia = inertia_of(vectors, &centroids, &next);
        if let Some(&last) = history.last() {
            debug_assert!(inertia <= last + 1e-9, "inertia rose: {last} -> {inertia}");
        }
        history.push(inertia);

        if assignments.as_ref() == Some(&next) {
            break;
        }
        assignments = Some(next.clone());

        // update step: centroids move to cluster means
        let dim = vectors[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in vectors.iter().zip(&next) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(v) {
                *s += x;
            }
        }
        for (j, sum) in sums.into_iter().enumerate() {
            if counts[j] > 0 {
                centroids[j] = sum.into_iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }

    let assignments = assignments.expect("at least one pass");
    let inertia = *history.last().expect("at least one pass");
    Ok(ClusterModel {
        centroids,
        assignments,
        inertia,
        inertia_history: history,
    })
}

fn embedded_vectors(corpus: &[PlanRecord]) -> Result<Vec<Vec<f64>>, PlannerError> {
    corpus
        .iter()
        .map(|r| {
            r.embedding
                .as_ref()
                .map(|e| e.values.clone())
                .ok_or_else(|| PlannerError::MissingEmbedding {
                    narrative_id: r.narrative_id.clone(),
                })
        })
        .collect()
}

fn demonstration_of(record: &PlanRecord) -> Demonstration {
    Demonstration {
        topic: record.topic.clone(),
        plan_text: serialize_plan(&record.plan),
    }
}

/// Clusters the embedded corpus and returns, per centroid in cluster order,
/// the nearest real record (ties to the lowest record index). A record
/// serving several centroids appears once, so the result may be shorter
/// than `k`.
pub fn select_demonstrations_cluster(
    corpus: &[PlanRecord],
    config: &PlannerConfig,
) -> Result<Vec<Demonstration>, PlannerError> {
    let vectors = embedded_vectors(corpus)?;
    if vectors.len() < config.k {
        return Err(PlannerError::TooFewVectors {
            have: vectors.len(),
            need: config.k,
        });
    }
    let model = kmeans(&vectors, config.k, config.seed)?;

    let mut selected_indices = Vec::new();
    for centroid in &model.centroids {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, v) in vectors.iter().enumerate() {
            let d = dist_sq(v, centroid);
            if d < best_dist {
                best_dist = d;
                best = i;
            }
        }
        if !selected_indices.contains(&best) {
            selected_indices.push(best);
        }
    }
    Ok(selected_indices
        .into_iter()
        .map(|i| demonstration_of(&corpus[i]))
        .collect())
}

/// Top-`n` records by cosine similarity between the topic embedding and the
/// record embeddings, descending; ties to the lower record index.
pub fn select_demonstrations_retrieval(
    corpus: &[PlanRecord],
    topic: &str,
    n: usize,
    client: &LlmClient,
) -> Result<Vec<Demonstration>, PlannerError> {
    if corpus.len() < n {
        return Err(PlannerError::TooFewVectors {
            have: corpus.len(),
            need: n,
        });
    }
    let query = client.embed_one(topic)?;
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(corpus.len());
    for (i, record) in corpus.iter().enumerate() {
        let embedding = record
            .embedding
            .as_ref()
            .ok_or_else(|| PlannerError::MissingEmbedding {
                narrative_id: record.narrative_id.clone(),
            })?;
        scored.push((i, query.cosine(embedding)));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(n)
        .map(|(i, _)| demonstration_of(&corpus[i]))
        .collect())
}

/// Drops demonstrations from the end of the list until the combined word
/// count fits the budget.
pub fn fit_demonstrations(demos: Vec<Demonstration>, word_budget: usize) -> Vec<Demonstration> {
    let mut total = 0;
    let mut keep = 0;
    for demo in &demos {
        let words = demo.topic.split_whitespace().count()
            + demo.plan_text.split_whitespace().count();
        if total + words > word_budget && keep > 0 {
            break;
        }
        total += words;
        keep += 1;
    }
    if keep < demos.len() {
        log::warn!(
            "truncated demonstrations from {} to {keep} to fit the {word_budget}-word budget",
            demos.len()
        );
    }
    demos.into_iter().take(keep).collect()
}

fn render_demonstrations(demos: &[Demonstration]) -> String {
    let mut out = String::new();
    for demo in demos {
        out.push_str("Topic: ");
        out.push_str(&demo.topic);
        out.push_str("\nPlan:\n");
        out.push_str(&demo.plan_text);
        if !demo.plan_text.ends_with('\n') {
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

pub fn plan_request(topic: &str, demonstrations: &[Demonstration]) -> ChatRequest {
    ChatRequest::new(templates::PLAN_GENERATION)
        .var("topic", topic)
        .var("demonstrations", render_demonstrations(demonstrations))
        .temperature(TEMP_GENERATION)
        .max_tokens(2048)
}

/// Generates a plan for a topic. An empty demonstration list is the
/// zero-shot planner.
pub fn generate_plan(
    topic: &str,
    demonstrations: &[Demonstration],
    client: &LlmClient,
) -> Result<PlanTree, PlannerError> {
    let response = client.complete(&plan_request(topic, demonstrations))?;
    let (tree, repaired) = parse_plan_lenient(&response.text, &ParseOptions::default())
        .map_err(PlannerError::UnparseablePlan)?;
    if repaired {
        log::info!("generated plan needed indentation repair");
    }
    Ok(tree)
}

#[derive(Debug, Serialize, Deserialize)]
struct FinetuneExample {
    prompt: String,
    completion: String,
}

/// Topic-conditioned instruction text used for each fine-tuning prompt.
pub fn finetune_prompt(topic: &str) -> String {
    format!("Create a tree-structured plan for the following topic.\n\nTopic: {topic}\nPlan:\n")
}

/// Writes `{prompt, completion}` JSONL, one example per plan record, for an
/// external trainer.
pub fn export_finetune_dataset(corpus: &[PlanRecord], path: &Path) -> Result<(), PlannerError> {
    if corpus.is_empty() {
        return Err(PlannerError::EmptyCorpus);
    }
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for record in corpus {
        let example = FinetuneExample {
            prompt: finetune_prompt(&record.topic),
            completion: serialize_plan(&record.plan),
        };
        writeln!(out, "{}", serde_json::to_string(&example).expect("example serializes"))?;
    }
    out.flush()?;
    Ok(())
}
