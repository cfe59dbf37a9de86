//! `cogdoc`: command-line front end for the two-stage document reasoning
//! engine. Every command writes its artifacts under a run directory named
//! by a hash of (config, seed, inputs); finished run directories are
//! immutable unless `--force` is passed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use cogdoc_core::backend::{Endpoint, HttpEndpoint, MockBackend, MockScript};
use cogdoc_core::config::{run_id, BackendMode, Config};
use cogdoc_core::corpus::load_corpus_with_budgets;
use cogdoc_core::grpo::{gradient_check, make_sim_env, render_curves_svg, train_toy, uniform_baseline};
use cogdoc_core::metrics::{aggregate, BenchmarkAdapter, BenchmarkStyle};
use cogdoc_core::orchestrator::{persist_run, run_pipeline, PipelineBackends, Trajectory, DONE_MARKER};
use cogdoc_core::patterns::{
    categorize_difficulty, synthesize_stage1_trace, synthesize_stage2_trace, PatternOptions,
};
use cogdoc_core::reward::{reward_trajectory, JudgeOptions};
use cogdoc_core::synthesis::{records_to_jsonl, synthesize_corpus_queries, SynthesisBackends, SynthesisConfig};
use cogdoc_core::{Corpus, QueryRecord, RunRecord};

#[derive(Parser)]
#[command(name = "cogdoc", version, about = "Two-stage document reasoning engine")]
struct Cli {
    /// JSON config file; defaults plus environment overrides when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (overrides config seeds.run_seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Max pages forwarded from stage 1 to stage 2 (overrides config).
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Answer over the whole document when stage 1 predicts no pages.
    #[arg(long, global = true)]
    fallback_on_empty: bool,
    /// Pixel budget of the skim tier (overrides config).
    #[arg(long, global = true)]
    tier_low_px: Option<u64>,
    /// Pixel budget of the answering tier (overrides config).
    #[arg(long, global = true)]
    tier_high_px: Option<u64>,
    /// Mock-backend script file (JSON list of rules).
    #[arg(long, global = true)]
    mock_script: Option<PathBuf>,
    /// Validate inputs and print the execution plan without backend calls.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Overwrite an existing completed run directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Benchmark {
    /// ANLS-style scoring (DocVQA-like).
    Anls,
    /// Exact-match accuracy and token F1.
    AccF1,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus manifest and summarize its contents.
    Ingest { manifest: PathBuf },
    /// Synthesize query/answer pairs from every layout anchor in a corpus.
    Synth { manifest: PathBuf },
    /// Synthesize SFT thinking traces for existing queries.
    Patterns {
        manifest: PathBuf,
        queries: PathBuf,
    },
    /// Run the two-stage pipeline over a query file.
    Run {
        manifest: PathBuf,
        queries: PathBuf,
    },
    /// Rescore the trajectories of a finished run with the hybrid reward.
    Reward {
        run_id: String,
        queries: PathBuf,
    },
    /// Train the toy softmax localization policy on a simulated corpus.
    TrainToy {
        /// Simulated documents.
        #[arg(long, default_value_t = 20)]
        docs: usize,
        /// Pages per simulated document.
        #[arg(long, default_value_t = 10)]
        pages: usize,
    },
    /// Aggregate a finished run's scores into a metric report.
    Eval {
        run_id: String,
        #[arg(long, value_enum, default_value_t = Benchmark::Anls)]
        benchmark: Benchmark,
    },
    /// Render a human-readable report for a finished run.
    Report { run_id: String },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let message = format!("{err:#}");
            let kind = if message.contains("input missing") || message.contains("cannot read") {
                "InputMissing"
            } else if message.contains("config") {
                "ConfigInvalid"
            } else if message.contains("already holds a completed run") {
                "RunDirOccupied"
            } else {
                "CommandFailed"
            };
            eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
            ExitCode::FAILURE
        }
    }
}

/// Shared backend construction: one mock serves every role, HTTP mode
/// builds one client per configured role.
enum Backends {
    Mock(MockBackend),
    Http(BTreeMap<String, HttpEndpoint>),
}

impl Backends {
    fn build(config: &Config, script_path: Option<&Path>) -> Result<Self> {
        match config.backend.mode {
            BackendMode::Mock => {
                let script = match script_path {
                    Some(p) => {
                        let text = fs::read_to_string(p)
                            .with_context(|| format!("cannot read mock script {}", p.display()))?;
                        serde_json::from_str::<MockScript>(&text).context("malformed mock script")?
                    }
                    None => MockScript::default(),
                };
                let mut mock = MockBackend::new(config.backend.seed, script);
                if config.backend.strict {
                    mock = mock.strict();
                }
                if !config.backend.emit_logits {
                    mock = mock.without_logits();
                }
                Ok(Backends::Mock(mock))
            }
            BackendMode::Http => {
                let mut map = BTreeMap::new();
                for (role, endpoint_config) in &config.backend.endpoints {
                    map.insert(
                        role.clone(),
                        HttpEndpoint::new(endpoint_config.clone())
                            .map_err(|e| anyhow!("endpoint '{role}': {e}"))?,
                    );
                }
                Ok(Backends::Http(map))
            }
        }
    }

    fn role(&self, name: &str) -> Result<&dyn Endpoint> {
        match self {
            Backends::Mock(m) => Ok(m),
            Backends::Http(map) => map
                .get(name)
                .map(|e| e as &dyn Endpoint)
                .ok_or_else(|| anyhow!("no endpoint configured for role '{name}'")),
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::from_env()?,
    };
    if let Some(seed) = cli.seed {
        config.seeds.run_seed = seed;
    }
    if let Some(k) = cli.k {
        config.pipeline.k = k;
    }
    if cli.fallback_on_empty {
        config.pipeline.fallback_on_empty = true;
    }
    if let Some(px) = cli.tier_low_px {
        config.tiers.low_px = px;
    }
    if let Some(px) = cli.tier_high_px {
        config.tiers.high_px = px;
    }
    config.validate()?;
    Ok(config)
}

fn require_file(path: &Path) -> Result<String> {
    if !path.is_file() {
        bail!("input missing: {}", path.display());
    }
    Ok(path.display().to_string())
}

fn load_corpus(config: &Config, manifest: &Path) -> Result<Corpus> {
    load_corpus_with_budgets(manifest, config.tiers.low_px, config.tiers.high_px)
        .map_err(|e| anyhow!("corpus: {e}"))
}

fn load_queries(path: &Path) -> Result<Vec<QueryRecord>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read queries {}", path.display()))?;
    let mut queries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        queries.push(
            serde_json::from_str::<QueryRecord>(line)
                .with_context(|| format!("queries line {}", lineno + 1))?,
        );
    }
    if queries.is_empty() {
        bail!("input missing: {} holds no query records", path.display());
    }
    Ok(queries)
}

/// Prepare (or refuse to reuse) the run directory for `id`.
fn claim_run_dir(config: &Config, id: &str, force: bool) -> Result<PathBuf> {
    let dir = config.paths.runs_dir.join(id);
    if dir.join(DONE_MARKER).exists() {
        if !force {
            bail!(
                "run directory {} already holds a completed run; pass --force to overwrite",
                dir.display()
            );
        }
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn finish_run_dir(dir: &Path) -> Result<()> {
    fs::write(dir.join(DONE_MARKER), b"")?;
    Ok(())
}

fn print_plan(command: &str, id: &str, config: &Config, inputs: &[&str], outputs: &[&str]) {
    let plan = json!({
        "command": command,
        "run_id": id,
        "run_dir": config.paths.runs_dir.join(id),
        "inputs": inputs,
        "outputs": outputs,
        "config_hash": config.config_hash(),
        "seed": config.seeds.run_seed,
    });
    println!("{}", serde_json::to_string_pretty(&plan).expect("plan serializes"));
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    let seed = config.seeds.run_seed;
    match &cli.command {
        Command::Ingest { manifest } => {
            let input = require_file(manifest)?;
            let id = run_id(&config, seed, &["ingest", &input]);
            if cli.dry_run {
                print_plan("ingest", &id, &config, &[&input], &["ingest.json"]);
                return Ok(());
            }
            let corpus = load_corpus(&config, manifest)?;
            let dir = claim_run_dir(&config, &id, cli.force)?;
            let docs: Vec<_> = corpus
                .documents()
                .map(|d| {
                    json!({
                        "doc_id": d.doc_id,
                        "pages": d.page_count(),
                        "anchors": d.anchors.len(),
                    })
                })
                .collect();
            let summary = json!({
                "run_id": id,
                "documents": docs,
                "total_documents": corpus.len(),
            });
            write_json(&dir.join("ingest.json"), &summary)?;
            finish_run_dir(&dir)?;
            println!("{summary}");
        }
        Command::Synth { manifest } => {
            let input = require_file(manifest)?;
            let id = run_id(&config, seed, &["synth", &input]);
            if cli.dry_run {
                print_plan(
                    "synth",
                    &id,
                    &config,
                    &[&input],
                    &["queries.jsonl", "synth_stats.json"],
                );
                return Ok(());
            }
            let corpus = load_corpus(&config, manifest)?;
            let backends = Backends::build(&config, cli.mock_script.as_deref())?;
            let synth_backends = SynthesisBackends {
                generator: backends.role("generator")?,
                filterer: backends.role("filterer")?,
            };
            let output =
                synthesize_corpus_queries(&corpus, &synth_backends, &SynthesisConfig::default());
            let dir = claim_run_dir(&config, &id, cli.force)?;
            fs::write(dir.join("queries.jsonl"), records_to_jsonl(&output.records))?;
            write_json(&dir.join("synth_stats.json"), &output.stats)?;
            write_json(&dir.join("synth_failures.json"), &output.failures)?;
            finish_run_dir(&dir)?;
            println!(
                "{}",
                json!({
                    "run_id": id,
                    "queries": output.records.len(),
                    "failures": output.failures.len(),
                })
            );
        }
        Command::Patterns { manifest, queries } => {
            let input_m = require_file(manifest)?;
            let input_q = require_file(queries)?;
            let id = run_id(&config, seed, &["patterns", &input_m, &input_q]);
            if cli.dry_run {
                print_plan(
                    "patterns",
                    &id,
                    &config,
                    &[&input_m, &input_q],
                    &["traces.jsonl"],
                );
                return Ok(());
            }
            let corpus = load_corpus(&config, manifest)?;
            let records = load_queries(queries)?;
            let backends = Backends::build(&config, cli.mock_script.as_deref())?;
            let generator = backends.role("generator")?;
            let policy = backends.role("policy")?;
            let judge = backends.role("judge")?;
            let verifier = backends.role("verifier")?;
            let opts = PatternOptions::default();
            let mut traces = Vec::new();
            let mut failures = Vec::new();
            for query in &records {
                let doc = corpus.get(&query.doc_id).map_err(|e| anyhow!("{e}"))?;
                match synthesize_stage1_trace(query, doc, generator, &opts, 5) {
                    Ok(t) => traces.push(t),
                    Err(e) => failures.push(json!({
                        "query_id": query.query_id, "stage": "stage1", "error": e.to_string(),
                    })),
                }
                let outcome = match categorize_difficulty(query, doc, policy, judge, &opts) {
                    Ok(o) => o,
                    Err(e) => {
                        failures.push(json!({
                            "query_id": query.query_id, "stage": "categorize", "error": e.to_string(),
                        }));
                        continue;
                    }
                };
                match synthesize_stage2_trace(query, doc, &outcome, policy, verifier, judge, &opts)
                {
                    Ok(t) => traces.push(t),
                    Err(e) => failures.push(json!({
                        "query_id": query.query_id, "stage": "stage2", "error": e.to_string(),
                    })),
                }
            }
            let dir = claim_run_dir(&config, &id, cli.force)?;
            fs::write(
                dir.join("traces.jsonl"),
                cogdoc_core::patterns::traces_to_jsonl(&traces),
            )?;
            write_json(&dir.join("pattern_failures.json"), &failures)?;
            finish_run_dir(&dir)?;
            println!(
                "{}",
                json!({ "run_id": id, "traces": traces.len(), "failures": failures.len() })
            );
        }
        Command::Run { manifest, queries } => {
            let input_m = require_file(manifest)?;
            let input_q = require_file(queries)?;
            let id = run_id(&config, seed, &["run", &input_m, &input_q]);
            if cli.dry_run {
                print_plan(
                    "run",
                    &id,
                    &config,
                    &[&input_m, &input_q],
                    &["records.jsonl", "trajectories/"],
                );
                return Ok(());
            }
            let corpus = load_corpus(&config, manifest)?;
            let records = load_queries(queries)?;
            let backends = Backends::build(&config, cli.mock_script.as_deref())?;
            let pipeline_backends = PipelineBackends {
                policy: backends.role("policy")?,
                extractor: backends.role("extractor").ok(),
            };
            let opts = config.pipeline_options();
            let dir = claim_run_dir(&config, &id, cli.force)?;
            let results = run_pipeline(
                &records,
                &corpus,
                &pipeline_backends,
                &opts,
                &id,
                &config.config_hash(),
                seed,
                config.pipeline.workers,
            );
            let mut ok: Vec<(RunRecord, Trajectory, Trajectory)> = Vec::new();
            let mut failures = Vec::new();
            for (query, result) in records.iter().zip(results) {
                match result {
                    Ok(r) => ok.push(r),
                    Err(e) => failures.push(json!({
                        "query_id": query.query_id, "error": e.to_string(),
                    })),
                }
            }
            persist_run(&dir, &ok, true)?;
            write_json(&dir.join("run_failures.json"), &failures)?;
            println!(
                "{}",
                json!({ "run_id": id, "records": ok.len(), "failures": failures.len() })
            );
        }
        Command::Reward { run_id: target, queries } => {
            let input_q = require_file(queries)?;
            let run_dir = config.paths.runs_dir.join(target);
            let records_path = run_dir.join("records.jsonl");
            require_file(&records_path)?;
            let id = run_id(&config, seed, &["reward", target, &input_q]);
            if cli.dry_run {
                print_plan(
                    "reward",
                    &id,
                    &config,
                    &[target, &input_q],
                    &["rewards.jsonl"],
                );
                return Ok(());
            }
            let queries_by_id: BTreeMap<String, QueryRecord> = load_queries(queries)?
                .into_iter()
                .map(|q| (q.query_id.clone(), q))
                .collect();
            let run_records = read_run_records(&records_path)?;
            let backends = Backends::build(&config, cli.mock_script.as_deref())?;
            let judge = backends.role("judge")?;
            let judge_opts = JudgeOptions::default();
            let mut lines = Vec::new();
            for record in &run_records {
                let query = queries_by_id
                    .get(&record.query_id)
                    .ok_or_else(|| anyhow!("query {} not present in {}", record.query_id, input_q))?;
                for trace_ref in [&record.stage1.trace_ref, &record.stage2.trace_ref] {
                    let traj: Trajectory =
                        serde_json::from_str(&fs::read_to_string(run_dir.join(trace_ref))?)?;
                    let outcome = reward_trajectory(&traj, query, judge, &judge_opts)
                        .map_err(|e| anyhow!("{e}"))?;
                    lines.push(serde_json::to_string(&json!({
                        "query_id": record.query_id,
                        "trace_ref": trace_ref,
                        "reward": outcome,
                    }))?);
                }
            }
            let dir = claim_run_dir(&config, &id, cli.force)?;
            fs::write(dir.join("rewards.jsonl"), lines.join("\n") + "\n")?;
            finish_run_dir(&dir)?;
            println!("{}", json!({ "run_id": id, "rewards": lines.len() }));
        }
        Command::TrainToy { docs, pages } => {
            let id = run_id(
                &config,
                seed,
                &["train-toy", &docs.to_string(), &pages.to_string()],
            );
            if cli.dry_run {
                print_plan(
                    "train-toy",
                    &id,
                    &config,
                    &[],
                    &["train_log.csv", "curves.svg", "train_config.json"],
                );
                return Ok(());
            }
            let env = make_sim_env(seed, *docs, *pages);
            let baseline = uniform_baseline(&env, 512, seed);
            let log = train_toy(&config.grpo, &env, seed).map_err(|e| anyhow!("{e}"))?;
            let grad_err = gradient_check(&config.grpo, &env, seed);
            let dir = claim_run_dir(&config, &id, cli.force)?;
            fs::write(dir.join("train_log.csv"), log.to_csv())?;
            let rewards: Vec<f64> = log.rows.iter().map(|r| r.mean_reward).collect();
            let kls: Vec<f64> = log.rows.iter().map(|r| r.kl).collect();
            fs::write(
                dir.join("curves.svg"),
                render_curves_svg(
                    &[("mean_reward", rewards), ("kl", kls)],
                    "toy GRPO localization",
                ),
            )?;
            write_json(&dir.join("train_config.json"), &log.config)?;
            finish_run_dir(&dir)?;
            println!(
                "{}",
                json!({
                    "run_id": id,
                    "iterations": log.rows.len(),
                    "uniform_baseline": baseline,
                    "final_mean_reward": log.rows.last().map(|r| r.mean_reward),
                    "gradient_check_max_rel_err": grad_err,
                })
            );
        }
        Command::Eval { run_id: target, benchmark } => {
            let run_dir = config.paths.runs_dir.join(target);
            let records_path = run_dir.join("records.jsonl");
            if cli.dry_run {
                require_file(&records_path)?;
                print_plan("eval", target, &config, &[target], &["eval.json"]);
                return Ok(());
            }
            require_file(&records_path)?;
            let records = read_run_records(&records_path)?;
            let adapter = match benchmark {
                Benchmark::Anls => BenchmarkAdapter {
                    name: "anls".to_string(),
                    style: BenchmarkStyle::Anls,
                    long_doc_pages: 20,
                },
                Benchmark::AccF1 => BenchmarkAdapter {
                    name: "acc_f1".to_string(),
                    style: BenchmarkStyle::AccF1,
                    long_doc_pages: 20,
                },
            };
            let report = aggregate(&records, &adapter).map_err(|e| anyhow!("{e}"))?;
            write_json(&run_dir.join("eval.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Report { run_id: target } => {
            let run_dir = config.paths.runs_dir.join(target);
            let eval_path = run_dir.join("eval.json");
            if cli.dry_run {
                require_file(&eval_path)?;
                print_plan("report", target, &config, &[target], &["report.md"]);
                return Ok(());
            }
            require_file(&eval_path)?;
            let report: cogdoc_core::metrics::MetricReport =
                serde_json::from_str(&fs::read_to_string(&eval_path)?)?;
            let mut out = format!(
                "# Run {} — {}\n\nQueries: {}\n\n## Aggregates\n\n| metric | mean | n |\n|---|---|---|\n",
                report.run_id,
                report.benchmark,
                report.per_query.len()
            );
            for (metric, agg) in &report.aggregates {
                out.push_str(&format!("| {} | {:.4} | {} |\n", metric, agg.mean, agg.count));
            }
            for (slice, rows) in &report.slices {
                out.push_str(&format!("\n## Slice {slice}\n\n| metric | mean | n |\n|---|---|---|\n"));
                for (metric, agg) in rows {
                    out.push_str(&format!("| {} | {:.4} | {} |\n", metric, agg.mean, agg.count));
                }
            }
            fs::write(run_dir.join("report.md"), &out)?;
            println!("{out}");
        }
    }
    Ok(())
}

fn read_run_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        records.push(serde_json::from_str::<RunRecord>(line)?);
    }
    if records.is_empty() {
        bail!("input missing: {} holds no run records", path.display());
    }
    Ok(records)
}
