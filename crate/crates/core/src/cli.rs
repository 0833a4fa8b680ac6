//! Command-line interface: `ingest`, `run`, `select`, `report`,
//! `eval-tasks`, and `export` over a workdir of persisted records.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Credentials are
//! only ever read from environment variables named in the endpoint config.

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use crate::corpus::{self, Manifest};
use crate::judge::{EndpointConfig, JudgeRole};
use crate::pipeline::{
    self, backend_for, load_scorecards, load_selection, stage_file_path, Checkpoint, PipelineError,
    RunConfig, RunReport, StageData,
};
use crate::rating::{PipeStage, ALL_STAGES};
use crate::report::{
    render_accuracy_jsonl, render_accuracy_text, task_accuracy, AccuracyTable,
};
use crate::scoring::{Rational, Weights};
use crate::selection::{RankKey, Strategy};
use crate::taxonomy::{sub_task_by_name, TaskLabel};

#[derive(Debug, Parser)]
#[command(
    name = "mmcurate",
    version,
    about = "Score image-text instruction-tuning entries with judge endpoints and select the top fraction"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a manifest; write the normalized manifest and rejection report.
    Ingest(IngestArgs),
    /// Run the rating stages (checkpointed, resumable), then select and report.
    Run(Box<RunArgs>),
    /// Re-run selection over persisted records.
    Select(SelectArgs),
    /// Regenerate reports from persisted records.
    Report(ReportArgs),
    /// Grade task predictions against ground-truth labels.
    EvalTasks(EvalTasksArgs),
    /// Export the selected entries as a new manifest.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    workdir: PathBuf,
    /// Keep only one shard of the manifest, as "i/n" (1-based).
    #[arg(long, value_parser = parse_shard)]
    shard: Option<(u32, u32)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Scale,
    Random,
    Iqa,
    Tqa,
    Itqa,
    EmbedSim,
}

impl From<StrategyArg> for Strategy {
    fn from(value: StrategyArg) -> Strategy {
        match value {
            StrategyArg::Scale => Strategy::Scale,
            StrategyArg::Random => Strategy::Random,
            StrategyArg::Iqa => Strategy::Iqa,
            StrategyArg::Tqa => Strategy::Tqa,
            StrategyArg::Itqa => Strategy::Itqa,
            StrategyArg::EmbedSim => Strategy::EmbedSim,
        }
    }
}

/// Per-role endpoint flags; the flag names carry the role, e.g.
/// `--endpoint.tqa.url`.
#[derive(Debug, Args)]
struct EndpointArgs {
    #[arg(long = "endpoint.iqa.url")]
    iqa_url: Option<String>,
    #[arg(long = "endpoint.iqa.model")]
    iqa_model: Option<String>,
    #[arg(long = "endpoint.iqa.key-env")]
    iqa_key_env: Option<String>,
    #[arg(long = "endpoint.tqa.url")]
    tqa_url: Option<String>,
    #[arg(long = "endpoint.tqa.model")]
    tqa_model: Option<String>,
    #[arg(long = "endpoint.tqa.key-env")]
    tqa_key_env: Option<String>,
    #[arg(long = "endpoint.caption.url")]
    caption_url: Option<String>,
    #[arg(long = "endpoint.caption.model")]
    caption_model: Option<String>,
    #[arg(long = "endpoint.caption.key-env")]
    caption_key_env: Option<String>,
    #[arg(long = "endpoint.mm.url")]
    mm_url: Option<String>,
    #[arg(long = "endpoint.mm.model")]
    mm_model: Option<String>,
    #[arg(long = "endpoint.mm.key-env")]
    mm_key_env: Option<String>,
    /// Request timeout in seconds, all endpoints.
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
    /// Retry budget per judge call, all endpoints.
    #[arg(long, default_value_t = 3)]
    max_attempts: u32,
    /// Base backoff between retries in milliseconds; doubles per attempt.
    #[arg(long, default_value_t = 500)]
    backoff_ms: u64,
    /// Maximum outstanding requests per endpoint.
    #[arg(long, default_value_t = 8)]
    max_in_flight: usize,
    /// Sampling temperature sent to every judge.
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
}

impl EndpointArgs {
    fn apply(&self, endpoints: &mut std::collections::HashMap<JudgeRole, EndpointConfig>) {
        let overrides = [
            (JudgeRole::Iqa, &self.iqa_url, &self.iqa_model, &self.iqa_key_env),
            (JudgeRole::Tqa, &self.tqa_url, &self.tqa_model, &self.tqa_key_env),
            (JudgeRole::Caption, &self.caption_url, &self.caption_model, &self.caption_key_env),
            (JudgeRole::Mm, &self.mm_url, &self.mm_model, &self.mm_key_env),
        ];
        for (role, url, model, key_env) in overrides {
            let endpoint = endpoints.get_mut(&role).expect("all roles present");
            if let Some(url) = url {
                endpoint.base_url = url.clone();
            }
            if let Some(model) = model {
                endpoint.model_name = model.clone();
            }
            if let Some(key_env) = key_env {
                endpoint.api_key_env = key_env.clone();
            }
            endpoint.timeout = std::time::Duration::from_secs(self.timeout_secs);
            endpoint.max_attempts = self.max_attempts;
            endpoint.backoff_base = std::time::Duration::from_millis(self.backoff_ms);
            endpoint.max_in_flight = self.max_in_flight;
            endpoint.temperature = self.temperature;
        }
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    workdir: PathBuf,
    /// Comma-separated subset of stages to run (iqa,tqa,task,caption,mm).
    #[arg(long, value_parser = parse_stages)]
    stages: Option<BTreeSet<PipeStage>>,
    /// Composite weights as "w_i,w_t,w_mm"; must sum to 1.
    #[arg(long, value_parser = parse_weights)]
    weights: Option<Weights>,
    /// Fraction to keep, in percent (e.g. 10 keeps the top tenth).
    #[arg(long, default_value = "10", value_parser = parse_percent)]
    top_percent: Rational,
    #[arg(long, value_enum, default_value_t = StrategyArg::Scale)]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Judge responses come from this fixture file instead of the network.
    #[arg(long)]
    mock: Option<PathBuf>,
    /// Embedding file for the embed-sim strategy.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    workers: usize,
    #[arg(long, default_value_t = 2)]
    parse_retry_limit: u32,
    /// Declared pool size for the histogram's unaccounted-entry line.
    #[arg(long)]
    pool_size: Option<u64>,
    /// Process only one shard of the manifest, as "i/n" (1-based).
    #[arg(long, value_parser = parse_shard)]
    shard: Option<(u32, u32)>,
    /// Reprocess entries even when a record already exists.
    #[arg(long)]
    force: bool,
    /// Print the planned per-stage workload and exit without judge calls.
    #[arg(long)]
    dry_run: bool,
    #[command(flatten)]
    endpoints: EndpointArgs,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    workdir: PathBuf,
    #[arg(long, value_enum, default_value_t = StrategyArg::Scale)]
    strategy: StrategyArg,
    #[arg(long, default_value = "10", value_parser = parse_percent)]
    top_percent: Rational,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    workdir: PathBuf,
    #[arg(long)]
    pool_size: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalTasksArgs {
    /// Ground-truth labels: JSONL {"id", "sub_task"}.
    #[arg(long)]
    truth: PathBuf,
    /// Predictions in the same shape; defaults to the workdir's task stage
    /// records.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    workdir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    workdir: PathBuf,
    /// Output path; defaults to <workdir>/selected_manifest.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_shard(value: &str) -> Result<(u32, u32), String> {
    let (index, count) = value
        .split_once('/')
        .ok_or_else(|| format!("expected i/n, got {value:?}"))?;
    let index: u32 = index.parse().map_err(|_| format!("bad shard index {index:?}"))?;
    let count: u32 = count.parse().map_err(|_| format!("bad shard count {count:?}"))?;
    if count == 0 || index == 0 || index > count {
        return Err(format!("shard must satisfy 1 <= i <= n, got {index}/{count}"));
    }
    Ok((index, count))
}

fn parse_stages(value: &str) -> Result<BTreeSet<PipeStage>, String> {
    let mut stages = BTreeSet::new();
    for part in value.split(',') {
        let part = part.trim();
        let stage = PipeStage::from_str_opt(part)
            .ok_or_else(|| format!("unknown stage {part:?} (expected one of iqa,tqa,task,caption,mm)"))?;
        stages.insert(stage);
    }
    if stages.is_empty() {
        return Err("at least one stage is required".into());
    }
    Ok(stages)
}

fn parse_weights(value: &str) -> Result<Weights, String> {
    let parts: Vec<&str> = value.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected w_i,w_t,w_mm, got {value:?}"));
    }
    let parse = |s: &str| Rational::from_str(s.trim()).map_err(|e| e.to_string());
    let w_i = parse(parts[0])?;
    let w_t = parse(parts[1])?;
    let w_mm = parse(parts[2])?;
    Weights::new(w_i, w_t, w_mm).map_err(|e| e.to_string())
}

fn parse_percent(value: &str) -> Result<Rational, String> {
    let percent = Rational::from_str(value).map_err(|e| e.to_string())?;
    let fraction = percent / Rational::from_int(100);
    if fraction <= Rational::zero() || fraction > Rational::one() {
        return Err(format!("--top-percent must lie in (0, 100], got {value}"));
    }
    Ok(fraction)
}

/// Parses argv and dispatches. Returns the process exit code.
pub fn run_cli() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Ingest(args) => cmd_ingest(args),
        Command::Run(args) => cmd_run(*args),
        Command::Select(args) => cmd_select(args),
        Command::Report(args) => cmd_report(args),
        Command::EvalTasks(args) => cmd_eval_tasks(args),
        Command::Export(args) => cmd_export(args),
    }
}

fn cmd_ingest(args: IngestArgs) -> Result<(), PipelineError> {
    std::fs::create_dir_all(&args.workdir).map_err(|source| PipelineError::Workdir {
        path: args.workdir.display().to_string(),
        source,
    })?;
    let outcome = corpus::load_manifest(&args.manifest)?;
    let mut entries = outcome.manifest.entries;
    if let Some((index, count)) = args.shard {
        entries = entries
            .into_iter()
            .enumerate()
            .filter(|(i, _)| (*i as u32) % count == index - 1)
            .map(|(_, e)| e)
            .collect();
    }
    let manifest = Manifest::from_entries(entries);
    corpus::write_manifest(args.workdir.join("ingested_manifest.jsonl"), &manifest.entries)?;
    corpus::write_rejections(args.workdir.join("rejections.jsonl"), &outcome.rejections)?;
    println!(
        "ingested {} entries ({} rejected) from {}",
        manifest.len(),
        outcome.rejections.len(),
        args.manifest.display()
    );
    for (source, count) in &manifest.source_counts {
        println!("  {source}: {count}");
    }
    Ok(())
}

fn print_run_report(report: &RunReport) {
    if report.dry_run {
        println!("dry run: planned per-stage workload");
        for (stage, pending) in &report.stage_pending {
            println!("  {stage}: {pending} entries pending");
        }
        return;
    }
    for stage in ALL_STAGES {
        let processed = report.stage_processed.get(&stage).copied().unwrap_or(0);
        let skipped = report.stage_skipped.get(&stage).copied().unwrap_or(0);
        let failed = report.stage_failed.get(&stage).copied().unwrap_or(0);
        if processed + skipped + failed > 0 {
            println!("stage {stage}: {processed} processed, {skipped} resumed, {failed} failed");
        }
    }
    println!("judge requests issued: {}", report.judge_requests);
    if report.malformed_checkpoint_lines > 0 {
        println!("malformed checkpoint lines ignored: {}", report.malformed_checkpoint_lines);
    }
    if report.assembled {
        println!(
            "scorecards: {} written, {} entries excluded by stage failures",
            report.cards_written, report.excluded_entries
        );
        println!("selected: {}", report.selected);
    } else {
        println!("stage coverage incomplete; selection deferred to a later run");
    }
}

fn cmd_run(args: RunArgs) -> Result<(), PipelineError> {
    let mut config = RunConfig::new(&args.manifest, &args.workdir);
    if let Some(stages) = args.stages {
        config.stages = stages;
    }
    if let Some(weights) = args.weights {
        config.weights = weights;
    }
    config.percentile = args.top_percent;
    config.strategy = args.strategy.into();
    config.seed = args.seed;
    config.workers = args.workers;
    config.parse_retry_limit = args.parse_retry_limit;
    config.declared_pool = args.pool_size;
    config.shard = args.shard;
    config.embeddings_path = args.embeddings.clone();
    config.force = args.force;
    config.dry_run = args.dry_run;
    args.endpoints.apply(&mut config.endpoints);

    let backend = backend_for(args.mock.as_deref())?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime");
    let report = runtime.block_on(pipeline::run(&config, backend))?;
    print_run_report(&report);
    Ok(())
}

fn stage_failures_from(checkpoint: &Checkpoint) -> BTreeMap<PipeStage, u64> {
    let mut failures = BTreeMap::new();
    for stage in ALL_STAGES {
        let count = checkpoint
            .stage_records(stage)
            .filter(|r| r.is_root_failure())
            .count() as u64;
        if count > 0 {
            failures.insert(stage, count);
        }
    }
    failures
}

fn cmd_select(args: SelectArgs) -> Result<(), PipelineError> {
    let outcome = corpus::load_manifest(&args.manifest)?;
    let manifest = outcome.manifest;
    let checkpoint = Checkpoint::load(&args.workdir)?;
    let strategy: Strategy = args.strategy.into();

    let cards_path = args.workdir.join("scorecards.jsonl");
    let mut config = RunConfig::new(&args.manifest, &args.workdir);
    config.percentile = args.top_percent;
    config.strategy = strategy;
    config.seed = args.seed;
    config.embeddings_path = args.embeddings.clone();

    let (selection, exclusions) = if cards_path.exists() {
        let cards = load_scorecards(&cards_path)?;
        pipeline::run_selection(&config, &cards)?
    } else {
        // The unimodal baselines only need their own stage records.
        let key = match strategy {
            Strategy::Iqa => RankKey::SI,
            Strategy::Tqa => RankKey::ST,
            Strategy::Itqa => RankKey::MeanIt,
            _ => {
                return Err(PipelineError::Config(format!(
                    "strategy {} needs scorecards.jsonl; run the full pipeline first",
                    strategy.as_str()
                )))
            }
        };
        (
            pipeline::select_from_stage_records(&checkpoint, key, args.top_percent, strategy)?,
            0,
        )
    };

    pipeline::write_selection_outputs(
        &args.workdir,
        &manifest,
        &selection,
        stage_failures_from(&checkpoint),
        exclusions,
    )?;
    println!(
        "selected {} of {} entries (strategy {})",
        selection.selected_ids.len(),
        manifest.len(),
        strategy.as_str()
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), PipelineError> {
    let outcome = corpus::load_manifest(&args.manifest)?;
    let manifest = outcome.manifest;
    let checkpoint = Checkpoint::load(&args.workdir)?;

    let cards = load_scorecards(&args.workdir.join("scorecards.jsonl"))?;
    pipeline::write_score_outputs(&args.workdir, &cards, args.pool_size)?;
    let histogram = crate::report::score_histogram(&cards, args.pool_size);
    print!("{}", crate::report::render_histogram_text(&histogram));

    let selection_path = args.workdir.join("selection.jsonl");
    if selection_path.exists() {
        let selection = load_selection(&selection_path)?;
        pipeline::write_selection_outputs(
            &args.workdir,
            &manifest,
            &selection,
            stage_failures_from(&checkpoint),
            0,
        )?;
        let stats = crate::report::selection_stats(
            &selection,
            &manifest,
            stage_failures_from(&checkpoint),
            0,
        )
        .map_err(|e| PipelineError::Report(e.to_string()))?;
        print!("{}", crate::report::render_selection_stats_text(&stats));
    }
    Ok(())
}

fn load_labels(path: &Path) -> Result<BTreeMap<String, TaskLabel>, PipelineError> {
    #[derive(serde::Deserialize)]
    struct LabelRecord {
        id: String,
        sub_task: String,
    }
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::ReadFile {
        path: path.display().to_string(),
        cause: e.to_string(),
    })?;
    let mut labels = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: LabelRecord =
            serde_json::from_str(line).map_err(|e| PipelineError::ReadFile {
                path: path.display().to_string(),
                cause: format!("line {}: {e}", idx + 1),
            })?;
        let sub_task = sub_task_by_name(&record.sub_task).ok_or_else(|| {
            PipelineError::ReadFile {
                path: path.display().to_string(),
                cause: format!("line {}: unknown sub-task {:?}", idx + 1, record.sub_task),
            }
        })?;
        labels.insert(record.id, TaskLabel::from_sub_task(sub_task));
    }
    Ok(labels)
}

fn predictions_from_workdir(workdir: &Path) -> Result<BTreeMap<String, TaskLabel>, PipelineError> {
    let checkpoint = Checkpoint::load(workdir)?;
    let mut predicted = BTreeMap::new();
    for record in checkpoint.stage_records(PipeStage::Task) {
        if let Some(StageData::Task(outcome)) = record.data() {
            predicted.insert(record.entry_id.clone(), outcome.label);
        }
    }
    if predicted.is_empty() {
        return Err(PipelineError::ReadFile {
            path: stage_file_path(workdir, PipeStage::Task).display().to_string(),
            cause: "no task predictions recorded".into(),
        });
    }
    Ok(predicted)
}

/// Library form of `eval-tasks`, reused by tests.
pub fn eval_tasks(
    predicted: &BTreeMap<String, TaskLabel>,
    truth: &BTreeMap<String, TaskLabel>,
) -> AccuracyTable {
    task_accuracy(predicted, truth)
}

fn cmd_eval_tasks(args: EvalTasksArgs) -> Result<(), PipelineError> {
    let truth = load_labels(&args.truth)?;
    let predicted = match (&args.predictions, &args.workdir) {
        (Some(path), _) => load_labels(path)?,
        (None, Some(workdir)) => predictions_from_workdir(workdir)?,
        (None, None) => {
            return Err(PipelineError::Config(
                "eval-tasks needs --predictions or --workdir".into(),
            ))
        }
    };
    let table = eval_tasks(&predicted, &truth);
    print!("{}", render_accuracy_text(&table));
    if let Some(workdir) = &args.workdir {
        std::fs::create_dir_all(workdir).map_err(|source| PipelineError::Workdir {
            path: workdir.display().to_string(),
            source,
        })?;
        std::fs::write(
            workdir.join("report_task_accuracy.jsonl"),
            render_accuracy_jsonl(&table),
        )
        .map_err(|source| PipelineError::Workdir {
            path: workdir.display().to_string(),
            source,
        })?;
        std::fs::write(
            workdir.join("report_task_accuracy.txt"),
            render_accuracy_text(&table),
        )
        .map_err(|source| PipelineError::Workdir {
            path: workdir.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<(), PipelineError> {
    let outcome = corpus::load_manifest(&args.manifest)?;
    let selection = load_selection(&args.workdir.join("selection.jsonl"))?;
    let exported = pipeline::exported_entries(&outcome.manifest, &selection);
    let out = args
        .out
        .unwrap_or_else(|| args.workdir.join("selected_manifest.jsonl"));
    corpus::write_manifest(&out, &exported)?;
    println!("exported {} entries to {}", exported.len(), out.display());
    Ok(())
}
