//! `eipe` — plan extraction, planner learning, and plan-conditioned writing
//! as batch subcommands. Files are the interface between stages: narratives
//! in, plans and traces out, demonstrations in, stories out.

mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use config::RunConfig;
use eipe_core::corpus;
use eipe_core::extraction::{self, RefinementMode};
use eipe_core::generation;
use eipe_core::judge::{self, CriteriaSet};
use eipe_core::llm::{
    HttpBackend, HttpConfig, LlmClient, ScriptedBackend, ScriptedSession, TemplateRegistry,
};
use eipe_core::plan_tree::{parse_plan, serialize_plan};
use eipe_core::planner::{self, Demonstration};

#[derive(Parser)]
#[command(name = "eipe", version, about = "Extract plans from narratives, learn a planner, write plan-guided stories, and judge the results")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Chat/embedding provider.
    #[arg(long, global = true, value_enum)]
    provider: Option<Provider>,
    /// Scripted session file (replay source for the scripted provider).
    #[arg(long, global = true)]
    script: Option<PathBuf>,
    /// Record live responses into this session file (live provider only).
    #[arg(long, global = true)]
    record: Option<PathBuf>,
    /// Base seed for clustering and judging.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Provider {
    Live,
    Scripted,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExtractMode {
    Structured,
    Llm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LearnMode {
    Cluster,
    Retrieval,
    Finetune,
}

#[derive(Subcommand)]
enum Command {
    /// Extract a refined plan from every narrative in a corpus.
    Extract {
        /// Narrative JSONL: {id, topic, text, genre?}.
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for plans.jsonl, traces.jsonl, failures.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Accuracy needed to pass evaluation (default 1.0).
        #[arg(long)]
        threshold: Option<f64>,
        /// Iteration cap per narrative (default 8).
        #[arg(long = "max-iters")]
        max_iters: Option<usize>,
        /// How refinement batches are applied.
        #[arg(long, value_enum)]
        mode: Option<ExtractMode>,
    },
    /// Dataset statistics in the train/test/avg/max shape.
    Stats {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Select demonstrations from a plan corpus (or export it for
    /// fine-tuning).
    Learn {
        /// Plan JSONL produced by `extract`.
        #[arg(long)]
        plans: PathBuf,
        #[arg(long, value_enum)]
        mode: LearnMode,
        /// Cluster count (default 20).
        #[arg(long)]
        k: Option<usize>,
        /// Output file: demonstrations JSONL, or the fine-tuning dataset.
        #[arg(long)]
        out: PathBuf,
        /// Query topic (required for retrieval mode).
        #[arg(long)]
        topic: Option<String>,
        /// Demonstrations to retrieve (default k).
        #[arg(long)]
        n: Option<usize>,
        /// Genre word for the characteristics prompt.
        #[arg(long)]
        genre: Option<String>,
        /// Also persist the corpus with characteristics and embeddings.
        #[arg(long = "save-embedded")]
        save_embedded: Option<PathBuf>,
    },
    /// Generate a plan for a topic, optionally with demonstrations.
    Plan {
        #[arg(long)]
        topic: String,
        /// Demonstrations JSONL from `learn` (omit for zero-shot).
        #[arg(long)]
        demos: Option<PathBuf>,
        /// Plan text output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a narrative from a plan file.
    Write {
        /// Plan text file (canonical indented format).
        #[arg(long)]
        plan: PathBuf,
        /// Narrative output path.
        #[arg(long)]
        out: PathBuf,
        /// Word budget (default 4500).
        #[arg(long)]
        budget: Option<usize>,
        /// Step log JSONL path.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Judge text pairs with majority voting.
    Judge {
        /// Pairs JSONL: {pair_id, comparison_id, premise, text_a, text_b}.
        #[arg(long)]
        pairs: PathBuf,
        /// Criteria set: novel (per-criterion) or storytelling (overall).
        #[arg(long)]
        criteria: String,
        /// Votes per pair (odd; default 3).
        #[arg(long)]
        votes: Option<usize>,
        /// Results JSONL output.
        #[arg(long)]
        out: PathBuf,
        /// Win-ratio CSV report path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Trace accounting: accuracy curve CSV and aggregate metrics.
    Trace {
        /// Trace JSONL produced by `extract`.
        #[arg(long)]
        traces: PathBuf,
        /// Accuracy-curve CSV output path.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(error) = run(cli) {
        // one machine-readable line on stderr
        eprintln!(
            "{}",
            serde_json::json!({ "error": format!("{error:#}") })
        );
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let Cli {
        config: config_path,
        provider,
        script,
        record,
        seed,
        command,
    } = cli;
    let config = RunConfig::load(config_path.as_deref())?;
    let seed = seed.or(config.seed).unwrap_or(0);
    let client = || build_client(provider, script.as_deref(), record.as_deref(), &config);

    match command {
        Command::Extract {
            corpus,
            out,
            threshold,
            max_iters,
            mode,
        } => cmd_extract(&client()?, &config, &corpus, &out, threshold, max_iters, mode),
        Command::Stats { train, test } => cmd_stats(&train, test.as_deref()),
        Command::Learn {
            plans,
            mode,
            k,
            out,
            topic,
            n,
            genre,
            save_embedded,
        } => cmd_learn(&client()?, &config, seed, &plans, mode, k, &out, topic, n, genre, save_embedded),
        Command::Plan { topic, demos, out } => {
            cmd_plan(&client()?, &config, &topic, demos.as_deref(), &out)
        }
        Command::Write {
            plan,
            out,
            budget,
            log,
        } => cmd_write(&client()?, &config, &plan, &out, budget, log.as_deref()),
        Command::Judge {
            pairs,
            criteria,
            votes,
            out,
            report,
        } => cmd_judge(&client()?, &config, seed, &pairs, &criteria, votes, &out, report.as_deref()),
        Command::Trace { traces, curve } => cmd_trace(&traces, curve.as_deref()),
    }
}

fn build_client(
    provider: Option<Provider>,
    script: Option<&Path>,
    record: Option<&Path>,
    config: &RunConfig,
) -> Result<LlmClient> {
    let provider = match (provider, config.provider.as_deref()) {
        (Some(p), _) => p,
        (None, Some("live")) => Provider::Live,
        (None, Some("scripted")) | (None, None) => Provider::Scripted,
        (None, Some(other)) => bail!("unknown provider `{other}` in config"),
    };
    let llm_config = config.llm_config();

    match provider {
        Provider::Scripted => {
            let script = script
                .map(Path::to_path_buf)
                .or_else(|| config.script.clone())
                .context("the scripted provider needs --script <session.jsonl>")?;
            if record.is_some() || config.record.is_some() {
                bail!("--record needs the live provider");
            }
            let session = ScriptedSession::load(&script)
                .with_context(|| format!("loading session {}", script.display()))?;
            Ok(LlmClient::new(
                Box::new(ScriptedBackend::replay_only(session)),
                TemplateRegistry::builtin(),
                llm_config,
            ))
        }
        Provider::Live => {
            let api_key = std::env::var("EIPE_API_KEY")
                .context("the live provider needs the EIPE_API_KEY environment variable")?;
            let http = HttpBackend::new(HttpConfig::new(
                config.llm.base_url.as_deref().unwrap_or("https://api.openai.com/v1"),
                config.llm.chat_model.as_deref().unwrap_or("gpt-4"),
                config.llm.embed_model.as_deref().unwrap_or("text-embedding-ada-002"),
                &api_key,
            ))
            .map_err(|e| anyhow::anyhow!("building http backend: {e}"))?;

            let record = record.map(Path::to_path_buf).or_else(|| config.record.clone());
            let backend: Box<dyn eipe_core::llm::Backend> = if let Some(record_path) = record {
                let session = match script.map(Path::to_path_buf).or_else(|| config.script.clone()) {
                    Some(script) => ScriptedSession::load(&script)
                        .with_context(|| format!("loading session {}", script.display()))?,
                    None => ScriptedSession::new(),
                };
                Box::new(ScriptedBackend::record_then_replay(
                    session,
                    Box::new(http),
                    Some(record_path),
                ))
            } else {
                Box::new(http)
            };
            Ok(LlmClient::new(backend, TemplateRegistry::builtin(), llm_config))
        }
    }
}

fn cmd_extract(
    client: &LlmClient,
    config: &RunConfig,
    corpus_path: &Path,
    out: &Path,
    threshold: Option<f64>,
    max_iters: Option<usize>,
    mode: Option<ExtractMode>,
) -> Result<()> {
    let narratives = corpus::load_narratives(corpus_path)
        .with_context(|| format!("loading narratives {}", corpus_path.display()))?;
    let mut extraction_config = config.extraction_config()?;
    if let Some(threshold) = threshold {
        extraction_config.pass_threshold = threshold;
    }
    if let Some(max_iters) = max_iters {
        extraction_config.max_iterations = max_iters;
    }
    if let Some(mode) = mode {
        extraction_config.refinement_mode = match mode {
            ExtractMode::Structured => RefinementMode::Structured,
            ExtractMode::Llm => RefinementMode::LlmRewrite,
        };
    }

    std::fs::create_dir_all(out)?;
    let (plans, traces, failures) =
        extraction::extract_corpus(&narratives, client, &extraction_config)?;
    corpus::save_plans(&plans, &out.join("plans.jsonl"))?;
    extraction::save_traces(&traces, &out.join("traces.jsonl"))?;
    if !failures.is_empty() {
        let mut lines = String::new();
        for failure in &failures {
            lines.push_str(&serde_json::json!({
                "narrative_id": failure.narrative_id,
                "error": failure.error.to_string(),
                "iterations": failure.trace.iterations.len(),
            }).to_string());
            lines.push('\n');
        }
        std::fs::write(out.join("failures.jsonl"), lines)?;
    }

    println!(
        "extracted {} plans ({} failures) -> {}",
        plans.len(),
        failures.len(),
        out.display()
    );
    if !traces.is_empty() {
        let metrics = extraction::aggregate(&traces)?;
        println!("{}", eipe_core::extraction::AggregateMetrics::csv_header());
        println!("{}", metrics.csv_row());
    }
    Ok(())
}

fn cmd_stats(train: &Path, test: Option<&Path>) -> Result<()> {
    let train_corpus = corpus::load_narratives(train)?;
    let test_corpus = match test {
        Some(path) => corpus::load_narratives(path)?,
        None => Vec::new(),
    };
    let stats = corpus::stats(&train_corpus, &test_corpus)?;
    println!("train_size,test_size,avg_length,max_length");
    println!(
        "{},{},{},{}",
        stats.train_size, stats.test_size, stats.avg_length, stats.max_length
    );
    Ok(())
}

fn load_demos(path: &Path) -> Result<Vec<Demonstration>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading demonstrations {}", path.display()))?;
    let mut demos = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let demo: Demonstration = serde_json::from_str(line)
            .with_context(|| format!("demonstrations line {}", idx + 1))?;
        demos.push(demo);
    }
    Ok(demos)
}

fn save_demos(demos: &[Demonstration], path: &Path) -> Result<()> {
    let mut out = String::new();
    for demo in demos {
        out.push_str(&serde_json::to_string(demo)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_learn(
    client: &LlmClient,
    config: &RunConfig,
    seed: u64,
    plans: &Path,
    mode: LearnMode,
    k: Option<usize>,
    out: &Path,
    topic: Option<String>,
    n: Option<usize>,
    genre: Option<String>,
    save_embedded: Option<PathBuf>,
) -> Result<()> {
    let mut corpus = corpus::load_plans(plans)
        .with_context(|| format!("loading plans {}", plans.display()))?;
    let mut planner_config = config.planner_config(seed)?;
    if let Some(k) = k {
        planner_config.k = k;
        planner_config.n_shots = n.unwrap_or(k);
    }
    let genre = genre.unwrap_or_else(|| config.genre());

    if matches!(mode, LearnMode::Finetune) {
        planner::export_finetune_dataset(&corpus, out)?;
        println!("exported {} fine-tuning examples -> {}", corpus.len(), out.display());
        return Ok(());
    }

    if corpus.iter().any(|r| r.embedding.is_none()) {
        planner::embed_plan_corpus(&mut corpus, &genre, client, planner_config.embedding_source)?;
    }
    if let Some(path) = save_embedded {
        corpus::save_plans(&corpus, &path)?;
    }

    let demos = match mode {
        LearnMode::Cluster => planner::select_demonstrations_cluster(&corpus, &planner_config)?,
        LearnMode::Retrieval => {
            let topic = topic.context("retrieval mode needs --topic")?;
            let n = n.unwrap_or(planner_config.n_shots);
            planner::select_demonstrations_retrieval(&corpus, &topic, n, client)?
        }
        LearnMode::Finetune => unreachable!("handled above"),
    };
    save_demos(&demos, out)?;
    println!("selected {} demonstrations -> {}", demos.len(), out.display());
    Ok(())
}

fn cmd_plan(
    client: &LlmClient,
    config: &RunConfig,
    topic: &str,
    demos: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let demos = match demos {
        Some(path) => load_demos(path)?,
        None => Vec::new(),
    };
    let planner_config = config.planner_config(0)?;
    let demos = planner::fit_demonstrations(demos, planner_config.demo_word_budget);
    let plan = planner::generate_plan(topic, &demos, client)?;
    std::fs::write(out, serialize_plan(&plan))?;
    println!("plan with {} nodes -> {}", plan.node_count(), out.display());
    Ok(())
}

fn cmd_write(
    client: &LlmClient,
    config: &RunConfig,
    plan_path: &Path,
    out: &Path,
    budget: Option<usize>,
    log: Option<&Path>,
) -> Result<()> {
    let plan_text = std::fs::read_to_string(plan_path)
        .with_context(|| format!("reading plan {}", plan_path.display()))?;
    let plan = parse_plan(&plan_text)
        .with_context(|| format!("parsing plan {}", plan_path.display()))?;
    let mut generation_config = config.generation_config();
    if let Some(budget) = budget {
        generation_config.word_budget = budget;
    }

    match generation::write_narrative(&plan, client, &generation_config) {
        Ok((narrative, steps)) => {
            std::fs::write(out, &narrative)?;
            if let Some(log_path) = log {
                write_step_log(&steps, log_path)?;
            }
            println!(
                "wrote {} words over {} steps -> {}",
                eipe_core::corpus::count_words(&narrative),
                steps.len(),
                out.display()
            );
            Ok(())
        }
        Err(failure) => {
            // keep whatever was written, then fail
            std::fs::write(out, &failure.partial_narrative)?;
            if let Some(log_path) = log {
                write_step_log(&failure.log, log_path)?;
            }
            bail!(
                "writer failed after {} steps ({}); partial narrative kept at {}",
                failure.log.len(),
                failure.error,
                out.display()
            );
        }
    }
}

fn write_step_log(steps: &[generation::StepLogEntry], path: &Path) -> Result<()> {
    let mut out = String::new();
    for entry in steps {
        out.push_str(&serde_json::to_string(entry)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_judge(
    client: &LlmClient,
    config: &RunConfig,
    seed: u64,
    pairs_path: &Path,
    criteria_name: &str,
    votes: Option<usize>,
    out: &Path,
    report: Option<&Path>,
) -> Result<()> {
    let criteria = CriteriaSet::by_name(criteria_name)
        .with_context(|| format!("unknown criteria set `{criteria_name}` (novel|storytelling)"))?;
    let pairs = judge::load_pairs(pairs_path)?;
    let votes = votes.unwrap_or_else(|| config.votes());
    let results = judge::judge_pairs(&pairs, &criteria, votes, seed, client)?;
    judge::save_results(&results, out)?;

    // one table per comparison id; tables are never merged
    let mut comparison_ids: Vec<String> =
        results.iter().map(|r| r.comparison_id.clone()).collect();
    comparison_ids.sort();
    comparison_ids.dedup();
    let mut report_csv =
        String::from("comparison_id,criterion,a_win_pct,b_win_pct,indistinguishable_pct\n");
    for comparison_id in &comparison_ids {
        let subset: Vec<_> = results
            .iter()
            .filter(|r| &r.comparison_id == comparison_id)
            .cloned()
            .collect();
        let table = judge::win_ratios(&subset, comparison_id)?;
        for line in table.to_csv().lines().skip(1) {
            report_csv.push_str(line);
            report_csv.push('\n');
        }
    }
    if let Some(report_path) = report {
        std::fs::write(report_path, &report_csv)?;
    }
    print!("{report_csv}");
    println!("judged {} pairs with {votes} votes -> {}", results.len(), out.display());
    Ok(())
}

fn cmd_trace(traces_path: &Path, curve: Option<&Path>) -> Result<()> {
    let traces = extraction::load_traces(traces_path)?;
    if let Some(curve_path) = curve {
        std::fs::write(curve_path, extraction::accuracy_curve_csv(&traces))?;
    }
    let metrics = extraction::aggregate(&traces)?;
    println!("{}", extraction::AggregateMetrics::csv_header());
    println!("{}", metrics.csv_row());
    Ok(())
}
