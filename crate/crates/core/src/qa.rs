//! Multiple-choice QA over narratives and plans: question generation,
//! answerability filtering, grading, plan evaluation, and derivation of
//! refinement instructions from wrong answers.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{templates, ChatRequest, LlmClient, LlmError, TEMP_EVALUATION, TEMP_GENERATION};
use crate::plan_tree::{serialize_plan, PlanTree};
use crate::refinement::{parse_instructions, InstructionBatch, INSTRUCTION_GRAMMAR};
use crate::util::parallel_map;

#[derive(Debug, Error)]
pub enum QaError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("no QA pairs to evaluate")]
    NoQuestions,
    #[error("report lists no wrong questions")]
    NoWrongQuestions,
    #[error("report references unknown question id `{0}`")]
    UnknownQuestionId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Letter {
    A,
    B,
    C,
    D,
}

impl Letter {
    pub const ALL: [Letter; 4] = [Letter::A, Letter::B, Letter::C, Letter::D];

    pub fn as_str(&self) -> &'static str {
        match self {
            Letter::A => "A",
            Letter::B => "B",
            Letter::C => "C",
            Letter::D => "D",
        }
    }

    fn from_char(c: char) -> Option<Letter> {
        match c.to_ascii_uppercase() {
            'A' => Some(Letter::A),
            'B' => Some(Letter::B),
            'C' => Some(Letter::C),
            'D' => Some(Letter::D),
            _ => None,
        }
    }
}

/// A set of answer letters. Text form joins letters with `;` (`"A;C"`).
/// May be empty only when it represents a refusal or an unparseable reply,
/// which always grades incorrect.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnswerSet(BTreeSet<Letter>);

impl AnswerSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_letters<I: IntoIterator<Item = Letter>>(letters: I) -> Self {
        AnswerSet(letters.into_iter().collect())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, letter: Letter) -> bool {
        self.0.contains(&letter)
    }

    pub fn letters(&self) -> impl Iterator<Item = Letter> + '_ {
        self.0.iter().copied()
    }
}

impl fmt::Display for AnswerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let joined: Vec<&str> = self.0.iter().map(Letter::as_str).collect();
        write!(f, "{}", joined.join(";"))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid answer set `{0}`")]
pub struct AnswerSetParseError(String);

impl FromStr for AnswerSet {
    type Err = AnswerSetParseError;

    /// Strict form: letters separated by `;`. The empty string is the empty
    /// set.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        if trimmed.is_empty() {
            return Ok(AnswerSet::new());
        }
        let mut set = BTreeSet::new();
        for token in trimmed.split(';') {
            let token = token.trim();
            let mut chars = token.chars();
            match (chars.next().and_then(Letter::from_char), chars.next()) {
                (Some(letter), None) => {
                    set.insert(letter);
                }
                _ => return Err(AnswerSetParseError(s.to_string())),
            }
        }
        Ok(AnswerSet(set))
    }
}

impl Serialize for AnswerSet {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for AnswerSet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    What,
    Why,
    How,
}

impl QuestionType {
    pub fn as_str(&self) -> &'static str {
        match self {
            QuestionType::What => "what",
            QuestionType::Why => "why",
            QuestionType::How => "how",
        }
    }

    fn parse(s: &str) -> Option<QuestionType> {
        match s.trim().to_ascii_lowercase().as_str() {
            "what" => Some(QuestionType::What),
            "why" => Some(QuestionType::Why),
            "how" => Some(QuestionType::How),
            _ => None,
        }
    }
}

/// The four labeled options of a question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Options {
    #[serde(rename = "A")]
    pub a: String,
    #[serde(rename = "B")]
    pub b: String,
    #[serde(rename = "C")]
    pub c: String,
    #[serde(rename = "D")]
    pub d: String,
}

impl Options {
    pub fn get(&self, letter: Letter) -> &str {
        match letter {
            Letter::A => &self.a,
            Letter::B => &self.b,
            Letter::C => &self.c,
            Letter::D => &self.d,
        }
    }
}

/// One multiple-choice question with its gold answer set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub id: String,
    pub question: String,
    pub options: Options,
    pub gold: AnswerSet,
    pub qtype: QuestionType,
    pub related_idea: String,
}

#[derive(Debug, Clone)]
pub struct QaConfig {
    pub words_per_question: usize,
    pub min_questions: usize,
    pub max_questions: usize,
    /// Extra generation rounds allowed when parsing yields fewer pairs than
    /// requested.
    pub generation_retries: usize,
    /// Narratives at or under this many words are sent whole to the
    /// instruction-derivation prompt; longer ones are excerpted.
    pub excerpt_word_budget: usize,
}

impl Default for QaConfig {
    fn default() -> Self {
        QaConfig {
            words_per_question: 100,
            min_questions: 5,
            max_questions: 60,
            generation_retries: 2,
            excerpt_word_budget: 3000,
        }
    }
}

/// Questions scale with narrative length: `ceil(words / words_per_question)`
/// clamped to the configured range.
pub fn target_question_count(word_count: usize, config: &QaConfig) -> usize {
    let raw = word_count.div_ceil(config.words_per_question.max(1));
    raw.clamp(config.min_questions, config.max_questions)
}

pub fn generation_request(narrative: &str, count: usize) -> ChatRequest {
    ChatRequest::new(templates::QA_GENERATION)
        .var("narrative", narrative)
        .var("count", count.to_string())
        .temperature(TEMP_GENERATION)
        .max_tokens(4096)
}

pub fn answer_request(pair: &QaPair, context: &str) -> ChatRequest {
    ChatRequest::new(templates::QA_ANSWER)
        .var("context", context)
        .var("question", &pair.question)
        .var("option_a", &pair.options.a)
        .var("option_b", &pair.options.b)
        .var("option_c", &pair.options.c)
        .var("option_d", &pair.options.d)
        .temperature(TEMP_EVALUATION)
        .max_tokens(64)
}

pub fn derive_request(pair: &QaPair, plan_text: &str, excerpt: &str) -> ChatRequest {
    ChatRequest::new(templates::DERIVE_INSTRUCTIONS)
        .var("grammar", INSTRUCTION_GRAMMAR)
        .var("plan", plan_text)
        .var("question", &pair.question)
        .var("option_a", &pair.options.a)
        .var("option_b", &pair.options.b)
        .var("option_c", &pair.options.c)
        .var("option_d", &pair.options.d)
        .var("gold", pair.gold.to_string())
        .var("excerpt", excerpt)
        .temperature(TEMP_EVALUATION)
        .max_tokens(512)
}

/// Parses generation output in the `Q:/TYPE:/A:..D:/ANSWER:/IDEA:` block
/// format. Malformed blocks are dropped (ids are assigned by the caller).
fn parse_qa_blocks(text: &str) -> Vec<ParsedBlock> {
    let mut blocks = Vec::new();
    for chunk in text.split("\n\n") {
        let chunk = chunk.trim();
        if chunk.is_empty() {
            continue;
        }
        if let Some(block) = parse_block(chunk) {
            blocks.push(block);
        } else {
            log::debug!("dropped malformed QA block: {:?}", chunk.lines().next());
        }
    }
    blocks
}

struct ParsedBlock {
    question: String,
    qtype: QuestionType,
    options: [Option<String>; 4],
    gold: AnswerSet,
    related_idea: String,
}

fn parse_block(chunk: &str) -> Option<ParsedBlock> {
    let mut question = None;
    let mut qtype = None;
    let mut options: [Option<String>; 4] = [None, None, None, None];
    let mut gold = None;
    let mut related_idea = String::new();

    for line in chunk.lines() {
        let Some((key, value)) = line.split_once(':') else {
            continue;
        };
        let value = value.trim().to_string();
        match key.trim().to_ascii_uppercase().as_str() {
            "Q" => question = Some(value),
            "TYPE" => qtype = QuestionType::parse(&value),
            "A" => options[0] = Some(value),
            "B" => options[1] = Some(value),
            "C" => options[2] = Some(value),
            "D" => options[3] = Some(value),
            "ANSWER" => gold = value.parse::<AnswerSet>().ok(),
            "IDEA" => related_idea = value,
            _ => {}
        }
    }

    let question = question.filter(|q| !q.is_empty())?;
    let gold = gold.filter(|g| !g.is_empty())?;
    if options.iter().any(|o| o.as_ref().is_none_or(|s| s.is_empty())) {
        return None;
    }
    Some(ParsedBlock {
        question,
        qtype: qtype?,
        options,
        gold,
        related_idea,
    })
}

/// Generates up to `target_count` QA pairs, retrying with the remaining
/// count while the model under-delivers. Duplicated questions are dropped;
/// ids are assigned sequentially (`q1`, `q2`, ...).
pub fn generate_qa_pairs(
    narrative: &str,
    target_count: usize,
    client: &LlmClient,
    config: &QaConfig,
) -> Result<Vec<QaPair>, QaError> {
    let mut accepted: Vec<QaPair> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();

    for _round in 0..=config.generation_retries {
        let need = target_count - accepted.len();
        if need == 0 {
            break;
        }
        let response = client.complete(&generation_request(narrative, need))?;
        let before = accepted.len();
        for block in parse_qa_blocks(&response.text) {
            if accepted.len() == target_count {
                break;
            }
            if !seen.insert(block.question.clone()) {
                continue;
            }
            let [a, b, c, d] = block.options;
            accepted.push(QaPair {
                id: format!("q{}", accepted.len() + 1),
                question: block.question,
                options: Options {
                    a: a.expect("checked"),
                    b: b.expect("checked"),
                    c: c.expect("checked"),
                    d: d.expect("checked"),
                },
                gold: block.gold,
                qtype: block.qtype,
                related_idea: block.related_idea,
            });
        }
        if accepted.len() == before {
            // no progress; a further identical request cannot help
            break;
        }
    }
    Ok(accepted)
}

/// Extracts an answer set from a model reply: the first nonempty line,
/// optionally prefixed `Answer:`, as `;`-separated letters. Anything else
/// (refusals included) is the empty set, which grades incorrect.
pub fn parse_letter_response(text: &str) -> AnswerSet {
    let Some(line) = text.lines().map(str::trim).find(|l| !l.is_empty()) else {
        return AnswerSet::new();
    };
    let line = strip_answer_prefix(line);
    match line.parse::<AnswerSet>() {
        Ok(set) if !set.is_empty() => set,
        _ => AnswerSet::new(),
    }
}

fn strip_answer_prefix(line: &str) -> &str {
    let lower = line.to_ascii_lowercase();
    if lower.starts_with("answer:") {
        line[7..].trim()
    } else {
        line
    }
}

/// Answers one question against a context (narrative or serialized plan).
pub fn answer_from_context(
    pair: &QaPair,
    context: &str,
    client: &LlmClient,
) -> Result<AnswerSet, QaError> {
    let response = client.complete(&answer_request(pair, context))?;
    Ok(parse_letter_response(&response.text))
}

/// Exact set match; no partial credit. `gold` must be nonempty.
pub fn grade(predicted: &AnswerSet, gold: &AnswerSet) -> bool {
    debug_assert!(!gold.is_empty(), "gold answer sets are never empty");
    predicted == gold
}

/// Keeps exactly the pairs the answering model gets right against the
/// original narrative, preserving order.
pub fn filter_qa_pairs(
    pairs: Vec<QaPair>,
    narrative: &str,
    client: &LlmClient,
) -> Result<Vec<QaPair>, QaError> {
    let answers = parallel_map(pairs.clone(), client.max_in_flight(), |_, pair| {
        answer_from_context(&pair, narrative, client)
    });
    let mut kept = Vec::new();
    for (pair, answer) in pairs.into_iter().zip(answers) {
        if grade(&answer?, &pair.gold) {
            kept.push(pair);
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub id: String,
    pub predicted: AnswerSet,
    pub correct: bool,
}

/// Per-question results plus the accuracy they imply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub results: Vec<QuestionResult>,
    pub accuracy: f64,
    pub wrong_ids: Vec<String>,
}

impl EvaluationReport {
    pub fn from_results(results: Vec<QuestionResult>) -> Self {
        let correct = results.iter().filter(|r| r.correct).count();
        let accuracy = if results.is_empty() {
            0.0
        } else {
            correct as f64 / results.len() as f64
        };
        let wrong_ids = results
            .iter()
            .filter(|r| !r.correct)
            .map(|r| r.id.clone())
            .collect();
        EvaluationReport {
            results,
            accuracy,
            wrong_ids,
        }
    }
}

/// Answers every pair using only the serialized plan as context.
pub fn evaluate_plan(
    plan: &PlanTree,
    pairs: &[QaPair],
    client: &LlmClient,
) -> Result<EvaluationReport, QaError> {
    if pairs.is_empty() {
        return Err(QaError::NoQuestions);
    }
    let context = serialize_plan(plan);
    let answers = parallel_map(pairs.to_vec(), client.max_in_flight(), |_, pair| {
        answer_from_context(&pair, &context, client)
    });
    let mut results = Vec::with_capacity(pairs.len());
    for (pair, answer) in pairs.iter().zip(answers) {
        let predicted = answer?;
        let correct = grade(&predicted, &pair.gold);
        results.push(QuestionResult {
            id: pair.id.clone(),
            predicted,
            correct,
        });
    }
    Ok(EvaluationReport::from_results(results))
}

/// The narrative text sent along with a failed question: the whole narrative
/// when it fits the word budget, otherwise the contiguous run of paragraphs
/// with the highest lexical overlap with the question and its related idea.
pub fn excerpt_for(narrative: &str, pair: &QaPair, config: &QaConfig) -> String {
    let total_words = narrative.split_whitespace().count();
    if total_words <= config.excerpt_word_budget {
        return narrative.to_string();
    }

    let paragraphs: Vec<&str> = narrative
        .split("\n\n")
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .collect();
    if paragraphs.len() <= 1 {
        // no paragraph structure: take the leading budget worth of words
        let words: Vec<&str> = narrative.split_whitespace().collect();
        return words[..config.excerpt_word_budget.min(words.len())].join(" ");
    }

    let query: BTreeSet<String> = word_set(&pair.question)
        .union(&word_set(&pair.related_idea))
        .cloned()
        .collect();
    let best = paragraphs
        .iter()
        .enumerate()
        .map(|(i, p)| (i, word_set(p).intersection(&query).count()))
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);

    let mut excerpt = paragraphs[best].to_string();
    let mut words = paragraphs[best].split_whitespace().count();
    for p in &paragraphs[best + 1..] {
        let extra = p.split_whitespace().count();
        if words + extra > config.excerpt_word_budget {
            break;
        }
        excerpt.push_str("\n\n");
        excerpt.push_str(p);
        words += extra;
    }
    excerpt
}

fn word_set(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// One derivation prompt per wrong question; the per-question responses are
/// parsed as instruction lines and concatenated in report order, tagged with
/// the originating question id.
pub fn derive_instructions(
    report: &EvaluationReport,
    plan: &PlanTree,
    narrative: &str,
    pairs: &[QaPair],
    client: &LlmClient,
    config: &QaConfig,
) -> Result<InstructionBatch, QaError> {
    if report.wrong_ids.is_empty() {
        return Err(QaError::NoWrongQuestions);
    }
    let plan_text = serialize_plan(plan);
    let mut wrong_pairs = Vec::with_capacity(report.wrong_ids.len());
    for id in &report.wrong_ids {
        let pair = pairs
            .iter()
            .find(|p| &p.id == id)
            .ok_or_else(|| QaError::UnknownQuestionId(id.clone()))?;
        wrong_pairs.push(pair.clone());
    }

    let responses = parallel_map(wrong_pairs.clone(), client.max_in_flight(), |_, pair| {
        let excerpt = excerpt_for(narrative, &pair, config);
        client.complete(&derive_request(&pair, &plan_text, &excerpt))
    });

    let mut batch = InstructionBatch::new();
    for (pair, response) in wrong_pairs.iter().zip(responses) {
        let parsed = parse_instructions(&response?.text).with_origin(&pair.id);
        batch.extend(parsed);
    }
    Ok(batch)
}
