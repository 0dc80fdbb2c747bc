//! Pairwise judging with blinded, seed-randomized presentation order,
//! majority voting over repeated votes, and per-comparison win-ratio tables.
//!
//! The two texts are always shown to the judge as "Story One" / "Story Two";
//! verdicts are mapped back through the presentation order so results are
//! stated in the caller's A/B frame. Win ratios are keyed by comparison id
//! and the API offers no way to aggregate across ids.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{templates, ChatRequest, LlmClient, LlmError, TEMP_EVALUATION};
use crate::util::{derive_seed, parallel_map};

pub const BLIND_NAME_ONE: &str = "Story One";
pub const BLIND_NAME_TWO: &str = "Story Two";

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("no usable [Final Choice] verdict after one retry")]
    UnparseableVerdict { raw: String },
    #[error("majority voting needs an odd vote count, got {count}")]
    EvenVoteCount { count: usize },
    #[error("votes disagree on criteria or granularity")]
    InconsistentVotes,
    #[error("result for comparison `{found}` mixed into table for `{expected}`")]
    MixedComparisons { expected: String, found: String },
    #[error("no results to tabulate")]
    EmptyResults,
    #[error("texts under judgment must be nonempty")]
    EmptyText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictGranularity {
    PerCriterion,
    Overall,
}

/// Which criteria a judgment covers and whether the verdict is per
/// criterion or a single overall choice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CriteriaSet {
    pub name: String,
    pub criteria: Vec<String>,
    pub granularity: VerdictGranularity,
    template_id: &'static str,
}

impl CriteriaSet {
    pub fn novel() -> Self {
        CriteriaSet {
            name: "novel".into(),
            criteria: vec!["interesting".into(), "coherent".into(), "relevant".into()],
            granularity: VerdictGranularity::PerCriterion,
            template_id: templates::JUDGE_NOVEL,
        }
    }

    pub fn storytelling() -> Self {
        CriteriaSet {
            name: "storytelling".into(),
            criteria: vec![
                "coherent".into(),
                "interesting".into(),
                "relevant".into(),
                "inspiring".into(),
            ],
            granularity: VerdictGranularity::Overall,
            template_id: templates::JUDGE_STORYTELLING,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "novel" => Some(Self::novel()),
            "storytelling" => Some(Self::storytelling()),
            _ => None,
        }
    }
}

/// A verdict in the caller's frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
    #[serde(rename = "tie")]
    Tie,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MajorityOutcome {
    A,
    B,
    #[serde(rename = "indistinguishable")]
    Indistinguishable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresentedOrder {
    /// Caller's A was shown first (as "Story One").
    AFirst,
    /// Caller's B was shown first.
    BFirst,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VerdictOutcome {
    PerCriterion(BTreeMap<String, Choice>),
    Overall(Choice),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub outcome: VerdictOutcome,
    pub presented_order: PresentedOrder,
    pub raw: String,
}

/// Seed for one vote, derived stably from the base seed, the pair id, and
/// the vote index, so every vote's presentation order is reproducible.
pub fn vote_seed(base_seed: u64, pair_id: &str, vote_index: usize) -> u64 {
    derive_seed(base_seed, pair_id, vote_index as u64)
}

/// Seeded coin flip for which text goes first.
pub fn presentation_order(seed: u64) -> PresentedOrder {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.random_bool(0.5) {
        PresentedOrder::BFirst
    } else {
        PresentedOrder::AFirst
    }
}

pub fn judge_request(
    criteria: &CriteriaSet,
    premise: &str,
    first_text: &str,
    second_text: &str,
    retry_notice: &str,
) -> ChatRequest {
    ChatRequest::new(criteria.template_id)
        .var("premise", premise)
        .var("name_one", BLIND_NAME_ONE)
        .var("name_two", BLIND_NAME_TWO)
        .var("text_one", first_text)
        .var("text_two", second_text)
        .var("retry_notice", retry_notice)
        .temperature(TEMP_EVALUATION)
        .max_tokens(1024)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlindChoice {
    First,
    Second,
    Tie,
}

fn unblind(blind: BlindChoice, order: PresentedOrder) -> Choice {
    match (blind, order) {
        (BlindChoice::Tie, _) => Choice::Tie,
        (BlindChoice::First, PresentedOrder::AFirst) => Choice::A,
        (BlindChoice::First, PresentedOrder::BFirst) => Choice::B,
        (BlindChoice::Second, PresentedOrder::AFirst) => Choice::B,
        (BlindChoice::Second, PresentedOrder::BFirst) => Choice::A,
    }
}

fn match_blind_name(value: &str) -> Option<BlindChoice> {
    let normalized = value
        .trim()
        .trim_end_matches(['.', ';', '!'])
        .trim()
        .to_ascii_lowercase();
    let one = normalized.contains("story one");
    let two = normalized.contains("story two");
    if normalized.contains("indistinguishable") {
        Some(BlindChoice::Tie)
    } else if one && !two {
        Some(BlindChoice::First)
    } else if two && !one {
        Some(BlindChoice::Second)
    } else {
        None
    }
}

fn criterion_aliases(criterion: &str) -> &'static [&'static str] {
    match criterion {
        "coherent" => &["coherence", "coherent"],
        "interesting" => &["interestingness", "interesting"],
        "relevant" => &["relevance", "relevant"],
        "inspiring" => &["inspiration", "inspiring"],
        _ => &[],
    }
}

/// Parses the `[Final Choice]` block (the last one in the reply) into blind
/// choices, one per criterion or a single overall one.
fn parse_verdict(text: &str, criteria: &CriteriaSet) -> Option<BTreeMap<String, BlindChoice>> {
    let marker = "[final choice]";
    let lower = text.to_ascii_lowercase();
    let idx = lower.rfind(marker)?;
    let after = &text[idx + marker.len()..];
    let after = after.trim_start_matches([':', ' ']);

    match criteria.granularity {
        VerdictGranularity::Overall => {
            let value = after.lines().map(str::trim).find(|l| !l.is_empty())?;
            let choice = match_blind_name(value)?;
            Some(BTreeMap::from([("overall".to_string(), choice)]))
        }
        VerdictGranularity::PerCriterion => {
            let mut out = BTreeMap::new();
            for criterion in &criteria.criteria {
                let aliases = criterion_aliases(criterion);
                let mut found = None;
                for line in after.lines() {
                    let Some((label, value)) = line.split_once(':') else {
                        continue;
                    };
                    let label = label.trim().to_ascii_lowercase();
                    if aliases.iter().any(|a| label == *a) {
                        found = match_blind_name(value);
                        break;
                    }
                }
                out.insert(criterion.clone(), found?);
            }
            Some(out)
        }
    }
}

const RETRY_NOTICE: &str = "Your previous reply was missing a usable [Final Choice] section. Answer again, ending with the [Final Choice] block in the exact requested format.";

/// Judges one pair: presentation order drawn from the seed, blinded prompt,
/// one retry on an unparseable reply, and the verdict mapped back to the
/// caller's A/B frame.
pub fn judge_pair(
    text_a: &str,
    text_b: &str,
    premise: &str,
    criteria: &CriteriaSet,
    client: &LlmClient,
    seed: u64,
) -> Result<JudgeVerdict, JudgeError> {
    if text_a.trim().is_empty() || text_b.trim().is_empty() {
        return Err(JudgeError::EmptyText);
    }
    let order = presentation_order(seed);
    let (first, second) = match order {
        PresentedOrder::AFirst => (text_a, text_b),
        PresentedOrder::BFirst => (text_b, text_a),
    };

    let response = client.complete(&judge_request(criteria, premise, first, second, ""))?;
    let (raw, blind) = match parse_verdict(&response.text, criteria) {
        Some(blind) => (response.text, blind),
        None => {
            log::warn!("unparseable judge verdict; retrying once");
            let second_try =
                client.complete(&judge_request(criteria, premise, first, second, RETRY_NOTICE))?;
            match parse_verdict(&second_try.text, criteria) {
                Some(blind) => (second_try.text, blind),
                None => {
                    return Err(JudgeError::UnparseableVerdict {
                        raw: second_try.text,
                    })
                }
            }
        }
    };

    let outcome = match criteria.granularity {
        VerdictGranularity::Overall => {
            VerdictOutcome::Overall(unblind(blind["overall"], order))
        }
        VerdictGranularity::PerCriterion => VerdictOutcome::PerCriterion(
            blind
                .into_iter()
                .map(|(criterion, choice)| (criterion, unblind(choice, order)))
                .collect(),
        ),
    };
    Ok(JudgeVerdict {
        outcome,
        presented_order: order,
        raw,
    })
}

fn vote_choices(vote: &JudgeVerdict) -> BTreeMap<String, Choice> {
    match &vote.outcome {
        VerdictOutcome::Overall(choice) => BTreeMap::from([("overall".to_string(), *choice)]),
        VerdictOutcome::PerCriterion(map) => map.clone(),
    }
}

/// Plurality vote per criterion; a tied plurality is `Indistinguishable`.
/// Requires an odd number of votes that all cover the same criteria.
pub fn majority(votes: &[JudgeVerdict]) -> Result<BTreeMap<String, MajorityOutcome>, JudgeError> {
    if votes.is_empty() || votes.len().is_multiple_of(2) {
        return Err(JudgeError::EvenVoteCount { count: votes.len() });
    }
    let maps: Vec<BTreeMap<String, Choice>> = votes.iter().map(vote_choices).collect();
    let keys: Vec<&String> = maps[0].keys().collect();
    for map in &maps[1..] {
        if map.keys().collect::<Vec<_>>() != keys {
            return Err(JudgeError::InconsistentVotes);
        }
    }

    let mut out = BTreeMap::new();
    for key in keys {
        let (mut a, mut b, mut tie) = (0usize, 0usize, 0usize);
        for map in &maps {
            match map[key] {
                Choice::A => a += 1,
                Choice::B => b += 1,
                Choice::Tie => tie += 1,
            }
        }
        let top = a.max(b).max(tie);
        let winners = [a, b, tie].iter().filter(|&&c| c == top).count();
        let outcome = if winners > 1 {
            MajorityOutcome::Indistinguishable
        } else if a == top {
            MajorityOutcome::A
        } else if b == top {
            MajorityOutcome::B
        } else {
            MajorityOutcome::Indistinguishable
        };
        out.insert(key.clone(), outcome);
    }
    Ok(out)
}

/// One pair to judge, as read from the pairs JSONL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairInput {
    pub pair_id: String,
    pub comparison_id: String,
    pub premise: String,
    pub text_a: String,
    pub text_b: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairResult {
    pub pair_id: String,
    pub comparison_id: String,
    pub votes: Vec<JudgeVerdict>,
    pub majority: BTreeMap<String, MajorityOutcome>,
}

/// Judges every pair (pairs in parallel, the votes of one pair in sequence)
/// with per-vote seeds derived from `(base_seed, pair_id, vote index)`.
pub fn judge_pairs(
    inputs: &[PairInput],
    criteria: &CriteriaSet,
    votes_per_pair: usize,
    base_seed: u64,
    client: &LlmClient,
) -> Result<Vec<PairResult>, JudgeError> {
    if votes_per_pair == 0 || votes_per_pair.is_multiple_of(2) {
        return Err(JudgeError::EvenVoteCount {
            count: votes_per_pair,
        });
    }
    let outcomes = parallel_map(inputs.to_vec(), client.max_in_flight(), |_, input| {
        let mut votes = Vec::with_capacity(votes_per_pair);
        for vote_index in 0..votes_per_pair {
            let seed = vote_seed(base_seed, &input.pair_id, vote_index);
            votes.push(judge_pair(
                &input.text_a,
                &input.text_b,
                &input.premise,
                criteria,
                client,
                seed,
            )?);
        }
        let majority = majority(&votes)?;
        Ok(PairResult {
            pair_id: input.pair_id,
            comparison_id: input.comparison_id,
            votes,
            majority,
        })
    });
    outcomes.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinRatioRow {
    pub a_win_pct: f64,
    pub b_win_pct: f64,
    pub indistinguishable_pct: f64,
}

/// Win percentages per criterion for exactly one comparison. Rows are keyed
/// by criterion; the table never aggregates across comparison ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRatioTable {
    pub comparison_id: String,
    pub rows: BTreeMap<String, WinRatioRow>,
    pub total_pairs: usize,
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

pub fn win_ratios(results: &[PairResult], comparison_id: &str) -> Result<WinRatioTable, JudgeError> {
    if results.is_empty() {
        return Err(JudgeError::EmptyResults);
    }
    for result in results {
        if result.comparison_id != comparison_id {
            return Err(JudgeError::MixedComparisons {
                expected: comparison_id.to_string(),
                found: result.comparison_id.clone(),
            });
        }
    }

    let keys: BTreeSet<&String> = results.iter().flat_map(|r| r.majority.keys()).collect();
    let total = results.len() as f64;
    let mut rows = BTreeMap::new();
    for key in keys {
        let (mut a, mut b, mut ind) = (0usize, 0usize, 0usize);
        for result in results {
            match result.majority.get(key) {
                Some(MajorityOutcome::A) => a += 1,
                Some(MajorityOutcome::B) => b += 1,
                Some(MajorityOutcome::Indistinguishable) | None => ind += 1,
            }
        }
        rows.insert(
            key.clone(),
            WinRatioRow {
                a_win_pct: round1(100.0 * a as f64 / total),
                b_win_pct: round1(100.0 * b as f64 / total),
                indistinguishable_pct: round1(100.0 * ind as f64 / total),
            },
        );
    }
    Ok(WinRatioTable {
        comparison_id: comparison_id.to_string(),
        rows,
        total_pairs: results.len(),
    })
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl WinRatioTable {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("comparison_id,criterion,a_win_pct,b_win_pct,indistinguishable_pct\n");
        for (criterion, row) in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                csv_field(&self.comparison_id),
                csv_field(criterion),
                row.a_win_pct,
                row.b_win_pct,
                row.indistinguishable_pct
            ));
        }
        out
    }
}

pub fn save_results(results: &[PairResult], path: &Path) -> std::io::Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for result in results {
        writeln!(out, "{}", serde_json::to_string(result).expect("result serializes"))?;
    }
    out.flush()
}

pub fn load_pairs(path: &Path) -> std::io::Result<Vec<PairInput>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PairInput = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("pairs line {}: {e}", idx + 1),
            )
        })?;
        pairs.push(pair);
    }
    Ok(pairs)
}
