//! The plan-extraction loop: sketch a plan from a narrative, build a QA set,
//! then evaluate → derive instructions → refine until the plan passes the
//! evaluation or the iteration budget runs out. Each narrative produces a
//! trace recording per-iteration accuracy and edit counts.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{NarrativeRecord, PlanCorpus, PlanRecord};
use crate::llm::{templates, ChatRequest, LlmClient, LlmError, TEMP_GENERATION};
use crate::plan_tree::{self, parse_plan_lenient, serialize_plan, NodeDelta, ParseOptions, PlanError, PlanTree};
use crate::qa::{self, QaConfig, QaError};
use crate::refinement::{apply_batch, ApplyReport, InstructionBatch, ParsedLine};
use crate::util::parallel_map;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("plan text unparseable even after repair: {0}")]
    UnparseablePlan(PlanError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Qa(#[from] QaError),
    #[error("empty narrative corpus")]
    EmptyCorpus,
    #[error("no traces to aggregate")]
    NoTraces,
}

/// A narrative whose extraction failed, with whatever trace accumulated
/// before the failure.
#[derive(Debug)]
pub struct ExtractFailure {
    pub narrative_id: String,
    pub error: ExtractError,
    pub trace: ExtractionTrace,
}

/// How refinement batches are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementMode {
    /// Deterministic structured application of each instruction.
    Structured,
    /// Hand the plan and the instruction list back to the model and
    /// re-parse its rewrite.
    LlmRewrite,
}

#[derive(Debug, Clone)]
pub struct ExtractionConfig {
    /// Accuracy at or above this passes the evaluation.
    pub pass_threshold: f64,
    pub max_iterations: usize,
    pub refinement_mode: RefinementMode,
    pub qa: QaConfig,
    /// Worker bound for extracting narratives in parallel.
    pub workers: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            pass_threshold: 1.0,
            max_iterations: 8,
            refinement_mode: RefinementMode::Structured,
            qa: QaConfig::default(),
            workers: 4,
        }
    }
}

/// One evaluate→refine pass. `t` starts at 1; the pass that first reaches
/// the threshold (or hits the cap) records zero edits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub accuracy: f64,
    pub applied_add: usize,
    pub applied_modify: usize,
    pub applied_adjust: usize,
    pub rejected: usize,
    pub delta: NodeDelta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionTrace {
    pub narrative_id: String,
    pub question_count: usize,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    pub final_accuracy: f64,
}

impl ExtractionTrace {
    fn empty(narrative_id: &str) -> Self {
        ExtractionTrace {
            narrative_id: narrative_id.to_string(),
            question_count: 0,
            iterations: Vec::new(),
            converged: false,
            final_accuracy: 0.0,
        }
    }

    /// Number of passes through the loop, counting the final passing (or
    /// capped) evaluation as one epoch.
    pub fn epochs(&self) -> usize {
        self.iterations.len()
    }

    pub fn total_add(&self) -> usize {
        self.iterations.iter().map(|i| i.applied_add).sum()
    }

    pub fn total_modify(&self) -> usize {
        self.iterations.iter().map(|i| i.applied_modify).sum()
    }

    pub fn total_adjust(&self) -> usize {
        self.iterations.iter().map(|i| i.applied_adjust).sum()
    }

    pub fn total_rejected(&self) -> usize {
        self.iterations.iter().map(|i| i.rejected).sum()
    }

    /// Net node-count movement across all refinement passes.
    pub fn node_change(&self) -> i64 {
        self.iterations.iter().map(|i| i.delta.nodes_change()).sum()
    }

    pub fn secondary_change(&self) -> i64 {
        self.iterations
            .iter()
            .map(|i| i.delta.secondary_change())
            .sum()
    }
}

pub fn sketch_request(narrative: &str) -> ChatRequest {
    ChatRequest::new(templates::PLAN_SKETCH)
        .var("narrative", narrative)
        .temperature(TEMP_GENERATION)
        .max_tokens(2048)
}

/// Asks the model for an initial tree-structured plan and parses it with the
/// lenient repair pass.
pub fn sketch_plan(narrative: &str, client: &LlmClient) -> Result<PlanTree, ExtractError> {
    let response = client.complete(&sketch_request(narrative))?;
    let (tree, repaired) = parse_plan_lenient(&response.text, &ParseOptions::default())
        .map_err(ExtractError::UnparseablePlan)?;
    if repaired {
        log::info!("plan sketch needed indentation repair");
    }
    Ok(tree)
}

/// Whether an evaluation clears the configured threshold.
pub fn pass_evaluation(report: &qa::EvaluationReport, config: &ExtractionConfig) -> bool {
    report.accuracy >= config.pass_threshold
}

pub fn rewrite_request(plan_text: &str, instructions: &str) -> ChatRequest {
    ChatRequest::new(templates::REFINE_REWRITE)
        .var("plan", plan_text)
        .var("instructions", instructions)
        .max_tokens(2048)
}

fn refine(
    plan: &PlanTree,
    batch: &InstructionBatch,
    config: &ExtractionConfig,
    client: &LlmClient,
) -> Result<(PlanTree, ApplyReport), ExtractError> {
    match config.refinement_mode {
        RefinementMode::Structured => Ok(apply_batch(plan, batch)),
        RefinementMode::LlmRewrite => {
            let lines: Vec<String> = batch
                .entries
                .iter()
                .map(|e| match &e.item {
                    ParsedLine::Instruction(i) => i.to_string(),
                    ParsedLine::Malformed { .. } => e.raw.clone(),
                })
                .collect();
            let response =
                client.complete(&rewrite_request(&serialize_plan(plan), &lines.join("\n")))?;
            let (rewritten, repaired) =
                parse_plan_lenient(&response.text, &ParseOptions::default())
                    .map_err(ExtractError::UnparseablePlan)?;
            if repaired {
                log::info!("rewritten plan needed indentation repair");
            }
            // In rewrite mode the counts are the requested operations; the
            // model applied them opaquely.
            let mut report = ApplyReport {
                applied_add: 0,
                applied_modify: 0,
                applied_adjust: 0,
                rejected: Vec::new(),
                delta: plan_tree::delta(plan, &rewritten),
            };
            for (index, entry) in batch.entries.iter().enumerate() {
                match &entry.item {
                    ParsedLine::Instruction(i) => match i.kind() {
                        crate::refinement::InstructionKind::Add => report.applied_add += 1,
                        crate::refinement::InstructionKind::Modify => report.applied_modify += 1,
                        crate::refinement::InstructionKind::Adjust => report.applied_adjust += 1,
                    },
                    ParsedLine::Malformed { reason } => {
                        report.rejected.push(crate::refinement::RejectedEntry {
                            index,
                            error: format!("ParseError: {reason}"),
                        })
                    }
                }
            }
            Ok((rewritten, report))
        }
    }
}

/// Runs the whole loop for one narrative. On failure the error carries the
/// trace accumulated so far.
pub fn extract_plan(
    record: &NarrativeRecord,
    client: &LlmClient,
    config: &ExtractionConfig,
) -> Result<(PlanTree, ExtractionTrace), Box<ExtractFailure>> {
    let mut trace = ExtractionTrace::empty(&record.id);
    let fail = |error: ExtractError, trace: ExtractionTrace| {
        Box::new(ExtractFailure {
            narrative_id: record.id.clone(),
            error,
            trace,
        })
    };

    let sketch = match sketch_plan(&record.text, client) {
        Ok(tree) => tree,
        Err(e) => return Err(fail(e, trace)),
    };

    let target = qa::target_question_count(record.word_count, &config.qa);
    let pairs = match qa::generate_qa_pairs(&record.text, target, client, &config.qa)
        .and_then(|pairs| qa::filter_qa_pairs(pairs, &record.text, client))
    {
        Ok(pairs) => pairs,
        Err(e) => return Err(fail(e.into(), trace)),
    };
    trace.question_count = pairs.len();

    if pairs.is_empty() {
        // nothing to check: the sketch passes vacuously
        log::warn!("narrative {}: no usable QA pairs survived filtering", record.id);
        trace.converged = true;
        trace.final_accuracy = 1.0;
        return Ok((sketch.with_source_id(record.id.clone()), trace));
    }

    let mut plan = sketch;
    let mut best_accuracy = f64::NEG_INFINITY;
    let mut best_plan = plan.clone();

    for t in 1..=config.max_iterations {
        let report = match qa::evaluate_plan(&plan, &pairs, client) {
            Ok(report) => report,
            Err(e) => return Err(fail(e.into(), trace)),
        };
        trace.final_accuracy = report.accuracy;
        if report.accuracy > best_accuracy {
            best_accuracy = report.accuracy;
            best_plan = plan.clone();
        }

        if pass_evaluation(&report, config) {
            trace.iterations.push(IterationRecord {
                t,
                accuracy: report.accuracy,
                applied_add: 0,
                applied_modify: 0,
                applied_adjust: 0,
                rejected: 0,
                delta: plan_tree::delta(&plan, &plan),
            });
            trace.converged = true;
            break;
        }
        if t == config.max_iterations {
            // out of refinement budget; a final refine would never be checked
            trace.iterations.push(IterationRecord {
                t,
                accuracy: report.accuracy,
                applied_add: 0,
                applied_modify: 0,
                applied_adjust: 0,
                rejected: 0,
                delta: plan_tree::delta(&plan, &plan),
            });
            break;
        }

        let batch = match qa::derive_instructions(
            &report,
            &plan,
            &record.text,
            &pairs,
            client,
            &config.qa,
        ) {
            Ok(batch) => batch,
            Err(e) => return Err(fail(e.into(), trace)),
        };
        let (next, apply_report) = match refine(&plan, &batch, config, client) {
            Ok(out) => out,
            Err(e) => return Err(fail(e, trace)),
        };
        trace.iterations.push(IterationRecord {
            t,
            accuracy: report.accuracy,
            applied_add: apply_report.applied_add,
            applied_modify: apply_report.applied_modify,
            applied_adjust: apply_report.applied_adjust,
            rejected: apply_report.rejected.len(),
            delta: apply_report.delta,
        });
        plan = next;
    }

    let result = if trace.converged { plan } else { best_plan };
    Ok((result.with_source_id(record.id.clone()), trace))
}

/// Extracts every narrative (in parallel up to `config.workers`), compiling
/// successes into a plan corpus. Failures do not abort the run.
pub fn extract_corpus(
    records: &[NarrativeRecord],
    client: &LlmClient,
    config: &ExtractionConfig,
) -> Result<(PlanCorpus, Vec<ExtractionTrace>, Vec<ExtractFailure>), ExtractError> {
    if records.is_empty() {
        return Err(ExtractError::EmptyCorpus);
    }
    let outcomes = parallel_map(records.to_vec(), config.workers, |_, record| {
        extract_plan(&record, client, config).map(|(plan, trace)| (record, plan, trace))
    });

    let mut corpus = Vec::new();
    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok((record, plan, trace)) => {
                corpus.push(PlanRecord {
                    narrative_id: record.id.clone(),
                    topic: record.topic.clone(),
                    plan,
                    characteristics: None,
                    embedding: None,
                });
                traces.push(trace);
            }
            Err(failure) => failures.push(*failure),
        }
    }
    Ok((corpus, traces, failures))
}

/// Arithmetic means of the per-trace refinement accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub avg_add: f64,
    pub avg_modify: f64,
    pub avg_adjust: f64,
    pub avg_node_delta: f64,
    pub avg_secondary_delta: f64,
    pub avg_epochs: f64,
    pub avg_questions: f64,
}

impl AggregateMetrics {
    pub fn csv_header() -> &'static str {
        "add,modify,adjust,all_nodes,secondary_nodes,average_epoch,average_questions"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.avg_add,
            self.avg_modify,
            self.avg_adjust,
            self.avg_node_delta,
            self.avg_secondary_delta,
            self.avg_epochs,
            self.avg_questions
        )
    }
}

pub fn aggregate(traces: &[ExtractionTrace]) -> Result<AggregateMetrics, ExtractError> {
    if traces.is_empty() {
        return Err(ExtractError::NoTraces);
    }
    let n = traces.len() as f64;
    let mean = |f: &dyn Fn(&ExtractionTrace) -> f64| traces.iter().map(f).sum::<f64>() / n;
    Ok(AggregateMetrics {
        avg_add: mean(&|t| t.total_add() as f64),
        avg_modify: mean(&|t| t.total_modify() as f64),
        avg_adjust: mean(&|t| t.total_adjust() as f64),
        avg_node_delta: mean(&|t| t.node_change() as f64),
        avg_secondary_delta: mean(&|t| t.secondary_change() as f64),
        avg_epochs: mean(&|t| t.epochs() as f64),
        avg_questions: mean(&|t| t.question_count as f64),
    })
}

/// Mean accuracy per iteration index. Traces shorter than `t` carry their
/// final accuracy forward; traces with no iterations are excluded.
pub fn accuracy_curve(traces: &[ExtractionTrace]) -> Vec<f64> {
    let with_iterations: Vec<&ExtractionTrace> =
        traces.iter().filter(|t| !t.iterations.is_empty()).collect();
    let Some(max_len) = with_iterations.iter().map(|t| t.iterations.len()).max() else {
        return Vec::new();
    };
    (0..max_len)
        .map(|idx| {
            let sum: f64 = with_iterations
                .iter()
                .map(|t| {
                    t.iterations
                        .get(idx)
                        .unwrap_or_else(|| t.iterations.last().expect("nonempty"))
                        .accuracy
                })
                .sum();
            sum / with_iterations.len() as f64
        })
        .collect()
}

/// `iteration,mean_accuracy` CSV of [`accuracy_curve`].
pub fn accuracy_curve_csv(traces: &[ExtractionTrace]) -> String {
    let mut out = String::from("iteration,mean_accuracy\n");
    for (idx, accuracy) in accuracy_curve(traces).iter().enumerate() {
        out.push_str(&format!("{},{}\n", idx + 1, accuracy));
    }
    out
}

pub fn save_traces(traces: &[ExtractionTrace], path: &Path) -> std::io::Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for trace in traces {
        writeln!(out, "{}", serde_json::to_string(trace).expect("trace serializes"))?;
    }
    out.flush()
}

pub fn load_traces(path: &Path) -> std::io::Result<Vec<ExtractionTrace>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut traces = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let trace: ExtractionTrace = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("trace line {}: {e}", idx + 1),
            )
        })?;
        traces.push(trace);
    }
    Ok(traces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ScriptedSession, TemplateRegistry};
    use crate::plan_tree::parse_plan;

    fn trace(narrative_id: &str, records: Vec<IterationRecord>, question_count: usize) -> ExtractionTrace {
        let converged = records.last().map(|r| r.accuracy >= 1.0).unwrap_or(false);
        let final_accuracy = records.last().map(|r| r.accuracy).unwrap_or(0.0);
        ExtractionTrace {
            narrative_id: narrative_id.into(),
            question_count,
            iterations: records,
            converged,
            final_accuracy,
        }
    }

    fn record(t: usize, accuracy: f64, add: usize, modify: usize) -> IterationRecord {
        IterationRecord {
            t,
            accuracy,
            applied_add: add,
            applied_modify: modify,
            applied_adjust: 0,
            rejected: 0,
            delta: NodeDelta {
                nodes_before: 5,
                nodes_after: 5 + add,
                secondary_before: 2,
                secondary_after: 2,
            },
        }
    }

    #[test]
    fn sketch_repairs_off_grid_output() {
        let reg = TemplateRegistry::builtin();
        let mut session = ScriptedSession::new();
        session
            .stub(
                &reg,
                &sketch_request("narrative text"),
                "Topic Line\n - one\n    - two\n",
            )
            .unwrap();
        let client = LlmClient::scripted(session);
        let tree = sketch_plan("narrative text", &client).unwrap();
        assert_eq!(tree.node_count(), 3);
        assert_eq!(tree.root().content(), "Topic Line");
    }

    #[test]
    fn sketch_fails_on_empty_output() {
        let reg = TemplateRegistry::builtin();
        let mut session = ScriptedSession::new();
        session.stub(&reg, &sketch_request("n"), "   \n ").unwrap();
        let client = LlmClient::scripted(session);
        assert!(matches!(
            sketch_plan("n", &client),
            Err(ExtractError::UnparseablePlan(_))
        ));
    }

    #[test]
    fn pass_is_inclusive_at_threshold() {
        let make = |accuracy| qa::EvaluationReport {
            results: vec![],
            accuracy,
            wrong_ids: vec![],
        };
        let mut config = ExtractionConfig::default();
        assert!(pass_evaluation(&make(1.0), &config));
        assert!(!pass_evaluation(&make(0.99), &config));
        config.pass_threshold = 0.9;
        assert!(pass_evaluation(&make(0.9), &config));
    }

    #[test]
    fn aggregate_means_per_field() {
        let traces = vec![
            trace("a", vec![record(1, 0.5, 2, 1), record(2, 1.0, 0, 0)], 4),
            trace("b", vec![record(1, 1.0, 0, 0)], 6),
        ];
        let m = aggregate(&traces).unwrap();
        assert!((m.avg_add - 1.0).abs() < 1e-12);
        assert!((m.avg_modify - 0.5).abs() < 1e-12);
        assert!((m.avg_epochs - 1.5).abs() < 1e-12);
        assert!((m.avg_questions - 5.0).abs() < 1e-12);
        assert!((m.avg_node_delta - 1.0).abs() < 1e-12);
        assert!(matches!(aggregate(&[]), Err(ExtractError::NoTraces)));
    }

    #[test]
    fn curve_carries_final_accuracy_forward() {
        let traces = vec![
            trace("a", vec![record(1, 1.0, 0, 0)], 3),
            trace("b", vec![record(1, 0.5, 1, 0), record(2, 1.0, 0, 0)], 3),
        ];
        let curve = accuracy_curve(&traces);
        assert_eq!(curve, vec![0.75, 1.0]);
    }

    #[test]
    fn curve_excludes_empty_traces() {
        let traces = vec![
            trace("a", vec![], 0),
            trace("b", vec![record(1, 0.6, 1, 0), record(2, 1.0, 0, 0)], 3),
        ];
        assert_eq!(accuracy_curve(&traces), vec![0.6, 1.0]);
        assert!(accuracy_curve(&[trace("a", vec![], 0)]).is_empty());
    }

    #[test]
    fn curve_csv_shape() {
        let traces = vec![trace("a", vec![record(1, 0.5, 1, 0), record(2, 1.0, 0, 0)], 3)];
        let csv = accuracy_curve_csv(&traces);
        assert_eq!(csv, "iteration,mean_accuracy\n1,0.5\n2,1\n");
    }

    #[test]
    fn traces_round_trip_as_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traces.jsonl");
        let traces = vec![
            trace("a", vec![record(1, 0.5, 2, 1), record(2, 1.0, 0, 0)], 4),
            trace("b", vec![], 0),
        ];
        save_traces(&traces, &path).unwrap();
        assert_eq!(load_traces(&path).unwrap(), traces);
    }

    #[test]
    fn corpus_extraction_collects_plans_traces_and_failures() {
        use crate::testing::{converging_extraction_scenario, non_improving_extraction_scenario};

        let converging = converging_extraction_scenario();
        let stuck = non_improving_extraction_scenario();
        let mut session = converging.session.clone();
        session.extend(stuck.session.clone());

        // a third narrative whose sketch comes back empty and fails
        let reg = TemplateRegistry::builtin();
        let broken = crate::corpus::NarrativeRecord::new(
            "broken-01",
            "a narrative that defeats sketching",
            "some text the model refuses to outline",
            None,
        );
        session.stub(&reg, &sketch_request(&broken.text), "").unwrap();

        let narratives = vec![
            converging.narrative.clone(),
            stuck.narrative.clone(),
            broken.clone(),
        ];
        let client = LlmClient::scripted(session);
        let (corpus, traces, failures) =
            extract_corpus(&narratives, &client, &converging.config).unwrap();

        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus[0].narrative_id, converging.narrative.id);
        assert_eq!(corpus[0].plan, converging.expected_final);
        assert_eq!(corpus[1].narrative_id, stuck.narrative.id);
        assert_eq!(traces.len(), 2);
        assert!(traces[0].converged);
        assert!(!traces[1].converged);

        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].narrative_id, "broken-01");
        assert!(matches!(failures[0].error, ExtractError::UnparseablePlan(_)));

        assert!(matches!(
            extract_corpus(&[], &client, &converging.config),
            Err(ExtractError::EmptyCorpus)
        ));
    }

    #[test]
    fn llm_failure_mid_loop_attaches_partial_trace() {
        // sketch and QA set succeed, but the first evaluation has no stub,
        // so the loop dies with the trace accumulated so far
        let reg = TemplateRegistry::builtin();
        let narrative = crate::corpus::NarrativeRecord::new(
            "halfway-01",
            "a topic",
            "a body of text for the extractor",
            None,
        );
        let pair_block = "\
Q: What is described?
TYPE: what
A: a door
B: a body of text
C: a ship
D: a lamp
ANSWER: B
IDEA: the subject";
        let mut session = crate::llm::ScriptedSession::new();
        session
            .stub(&reg, &sketch_request(&narrative.text), "A Topic\n  - the text\n")
            .unwrap();
        session
            .stub(&reg, &qa::generation_request(&narrative.text, 5), pair_block)
            .unwrap();
        session
            .stub(&reg, &qa::generation_request(&narrative.text, 4), pair_block)
            .unwrap();
        let pair = crate::qa::QaPair {
            id: "q1".into(),
            question: "What is described?".into(),
            options: crate::qa::Options {
                a: "a door".into(),
                b: "a body of text".into(),
                c: "a ship".into(),
                d: "a lamp".into(),
            },
            gold: "B".parse().unwrap(),
            qtype: crate::qa::QuestionType::What,
            related_idea: "the subject".into(),
        };
        session
            .stub(&reg, &qa::answer_request(&pair, &narrative.text), "B")
            .unwrap();

        let client = LlmClient::scripted(session);
        let failure = extract_plan(&narrative, &client, &ExtractionConfig::default()).unwrap_err();
        assert_eq!(failure.narrative_id, "halfway-01");
        assert_eq!(failure.trace.question_count, 1);
        assert!(failure.trace.iterations.is_empty());
        assert!(matches!(failure.error, ExtractError::Qa(_)));
    }

    #[test]
    fn empty_qa_set_passes_vacuously() {
        let reg = TemplateRegistry::builtin();
        let narrative = crate::corpus::NarrativeRecord::new(
            "noqa-01",
            "a topic",
            "text that yields no usable questions",
            None,
        );
        let mut session = crate::llm::ScriptedSession::new();
        session
            .stub(&reg, &sketch_request(&narrative.text), "A Topic\n  - something\n")
            .unwrap();
        // the model never produces a parseable question
        session
            .stub(&reg, &qa::generation_request(&narrative.text, 5), "no questions today")
            .unwrap();
        let client = LlmClient::scripted(session);
        let (plan, trace) =
            extract_plan(&narrative, &client, &ExtractionConfig::default()).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.question_count, 0);
        assert!(trace.iterations.is_empty());
        assert_eq!(plan.node_count(), 2);
    }

    #[test]
    fn rewrite_mode_reparses_model_rewrite() {
        let reg = TemplateRegistry::builtin();
        let plan = parse_plan("TOPIC\n  - A\n").unwrap();
        let batch = crate::refinement::parse_instructions("ADD [] END: B\nnonsense here");
        let lines = "ADD [] END: B\nnonsense here";
        let mut session = ScriptedSession::new();
        session
            .stub(
                &reg,
                &rewrite_request(&serialize_plan(&plan), lines),
                "TOPIC\n  - A\n  - B\n",
            )
            .unwrap();
        let client = LlmClient::scripted(session);
        let config = ExtractionConfig {
            refinement_mode: RefinementMode::LlmRewrite,
            ..ExtractionConfig::default()
        };
        let (rewritten, report) = refine(&plan, &batch, &config, &client).unwrap();
        assert_eq!(rewritten.node_count(), 3);
        assert_eq!(report.applied_add, 1);
        assert_eq!(report.rejected.len(), 1);
        assert_eq!(report.delta.nodes_change(), 1);
    }
}
