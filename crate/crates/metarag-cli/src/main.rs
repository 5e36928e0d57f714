//! `metarag` binary: detect, evaluate, pareto and serve subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use metarag::eval::{
    self, consistency, evaluate, pareto_front, AliasMap, ConfigResult, EvalError, GridSpec,
    MetricsSummary,
};
use metarag::model::DetectionInput;
use metarag::pipeline::{Backends, Detector};
use metarag_cli::server;
use metarag_cli::settings::{resolve_config_arg, resolve_rules_arg, DetectorSettings};

#[derive(Parser)]
#[command(name = "metarag", version, about = "Hallucination detection for RAG answers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run detection on a single query/context/answer triple.
    Detect(DetectArgs),
    /// Evaluate a labeled dataset over one configuration or a grid.
    Evaluate(EvaluateArgs),
    /// Compute the non-dominated front over saved evaluation results.
    Pareto(ParetoArgs),
    /// Run the HTTP detection service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    query: String,
    /// JSON file holding a list of context chunk strings.
    #[arg(long, conflicts_with = "chunk")]
    context_file: Option<PathBuf>,
    /// One context chunk; repeat for more.
    #[arg(long)]
    chunk: Vec<String>,
    #[arg(long, conflicts_with = "answer_file")]
    answer: Option<String>,
    #[arg(long)]
    answer_file: Option<PathBuf>,
    /// Detector settings file, or a bare config string such as
    /// "mini/41/multi/2/0" (which runs against offline mock backends).
    #[arg(long)]
    config: String,
    /// Topic rules JSON; bundled defaults when omitted.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// JSONL dataset, one labeled record per line.
    #[arg(long)]
    dataset: PathBuf,
    /// Detector settings file or config string; supplies the base run
    /// config and, for grids, the backend wiring for every model id.
    #[arg(long)]
    config: String,
    /// Grid preset name ("paper26") or a grid JSON file.
    #[arg(long)]
    grid: Option<String>,
    /// Seeds to rerun with; more than one adds a consistency report.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ParetoArgs {
    /// Directory of result_*.json files written by `evaluate`.
    #[arg(long)]
    results_dir: PathBuf,
    #[arg(long, default_value = "f1")]
    objective: String,
    #[arg(long, default_value = "tokens")]
    cost: String,
    /// Front destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "METARAG_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long)]
    config: String,
    #[arg(long)]
    rules: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::FAILURE;
        }
    };
    let outcome = match cli.command {
        Command::Detect(args) => run_detect(args),
        Command::Evaluate(args) => run_evaluate(args).map(|_| ExitCode::SUCCESS),
        Command::Pareto(args) => run_pareto(args).map(|_| ExitCode::SUCCESS),
        Command::Serve(args) => run_serve(args).map(|_| ExitCode::SUCCESS),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn write_or_print(out: Option<&Path>, json: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => std::fs::write(path, json)
            .with_context(|| format!("writing {}", path.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn run_detect(args: DetectArgs) -> anyhow::Result<ExitCode> {
    let context = match (&args.context_file, args.chunk.is_empty()) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<Vec<String>>(&text)
                .with_context(|| format!("{} must be a JSON list of strings", path.display()))?
        }
        (None, false) => args.chunk.clone(),
        (None, true) => bail!("provide --context-file or at least one --chunk"),
    };
    let answer = match (&args.answer, &args.answer_file) {
        (Some(answer), _) => answer.clone(),
        (None, Some(path)) => std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?,
        (None, None) => bail!("provide --answer or --answer-file"),
    };

    let settings = resolve_config_arg(&args.config)?;
    let rules = resolve_rules_arg(args.rules.as_deref())?;
    let detector = settings.build(rules)?;
    let report = detector.detect(&DetectionInput { query: args.query, context, answer })?;

    let json = serde_json::to_string_pretty(&report)?;
    write_or_print(args.out.as_deref(), &json)?;
    Ok(if report.flagged { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn seeded(settings: &DetectorSettings, seed: u64) -> DetectorSettings {
    let mut settings = settings.clone();
    settings.run.seed = seed;
    settings
}

fn run_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let dataset = eval::load_dataset(&args.dataset)?;
    for warning in &dataset.warnings {
        eprintln!("warning: {warning}");
    }
    if dataset.records.is_empty() {
        bail!("dataset {} has no records", args.dataset.display());
    }
    let settings = resolve_config_arg(&args.config)?;
    let seeds = if args.seeds.is_empty() { vec![settings.run.seed] } else { args.seeds.clone() };
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;

    let grid = match &args.grid {
        Some(name) if name == "paper26" => Some(GridSpec::paper26()),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading grid file {path}"))?;
            Some(GridSpec::from_json(&text)?)
        }
        None => None,
    };

    // One full pass per seed; files are written from the first seed and the
    // spread across seeds goes into the consistency report.
    let mut per_seed: Vec<Vec<ConfigResult>> = Vec::new();
    for &seed in &seeds {
        let settings = seeded(&settings, seed);
        let results = match &grid {
            Some(grid) => {
                let aliases = AliasMap::default_aliases();
                let rules = resolve_rules_arg(args.rules.as_deref())?;
                let make = |config: &metarag::model::RunConfig| -> Result<Detector, EvalError> {
                    let backends = Backends::resolve(config, &settings.backends)
                        .map_err(|e| EvalError::GridInvalid(e.to_string()))?;
                    let rules = metarag::policy::TopicRuleSet::new(rules.rules().to_vec())
                        .map_err(|e| EvalError::GridInvalid(e.to_string()))?;
                    Detector::new(config.clone(), backends, rules)
                        .map_err(|e| EvalError::GridInvalid(e.to_string()))
                };
                eval::run_grid(
                    &dataset.records,
                    grid,
                    &aliases,
                    &settings.run,
                    make,
                    settings.parallelism.unwrap_or(4),
                )?
            }
            None => {
                let rules = resolve_rules_arg(args.rules.as_deref())?;
                let detector = settings.build(rules)?;
                let metrics = evaluate(
                    &dataset.records,
                    &detector,
                    settings.parallelism.unwrap_or(4),
                )?;
                vec![ConfigResult {
                    config_id: "config".to_string(),
                    config_string: args.config.clone(),
                    config: settings.run.clone(),
                    metrics,
                }]
            }
        };
        per_seed.push(results);
    }

    let first = &per_seed[0];
    for result in first {
        let path = args.out_dir.join(format!("result_{}.json", result.config_id));
        std::fs::write(&path, serde_json::to_string_pretty(result)?)?;
    }
    std::fs::write(args.out_dir.join("leaderboard.md"), eval::render_leaderboard(first))?;

    if seeds.len() > 1 {
        let mut reports = BTreeMap::new();
        for (i, result) in first.iter().enumerate() {
            let summaries: Vec<MetricsSummary> =
                per_seed.iter().map(|run| run[i].metrics.clone()).collect();
            reports.insert(result.config_id.clone(), consistency(&summaries, &seeds)?);
        }
        std::fs::write(
            args.out_dir.join("consistency.json"),
            serde_json::to_string_pretty(&reports)?,
        )?;
    }
    println!(
        "evaluated {} configuration(s) over {} seed(s) into {}",
        first.len(),
        seeds.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn run_pareto(args: ParetoArgs) -> anyhow::Result<()> {
    let mut results = Vec::new();
    let entries = std::fs::read_dir(&args.results_dir)
        .with_context(|| format!("reading {}", args.results_dir.display()))?;
    for entry in entries {
        let path = entry?.path();
        let is_result = path
            .file_name()
            .and_then(|n| n.to_str())
            .map(|n| n.starts_with("result_") && n.ends_with(".json"))
            .unwrap_or(false);
        if !is_result {
            continue;
        }
        let text = std::fs::read_to_string(&path)?;
        let result: ConfigResult = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        results.push(result);
    }
    if results.is_empty() {
        bail!("no result_*.json files in {}", args.results_dir.display());
    }
    results.sort_by(|a, b| a.config_id.cmp(&b.config_id));
    let front = pareto_front(&results, &args.objective, &args.cost)?;
    let json = serde_json::to_string_pretty(&front)?;
    write_or_print(args.out.as_deref(), &json)?;
    Ok(())
}

fn run_serve(args: ServeArgs) -> anyhow::Result<()> {
    let settings = resolve_config_arg(&args.config)?;
    let rules = resolve_rules_arg(args.rules.as_deref())?;
    let detector = settings.build(rules)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", args.port)).await?;
        eprintln!("listening on {}", listener.local_addr()?);
        server::serve(listener, detector).await
    })
}
