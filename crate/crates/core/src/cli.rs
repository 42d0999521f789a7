//! Command-line front end over the library.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{BackendKind, Config, Session};
use crate::datasets::catalog::{load_sicap_csv, scan_bracs, scan_class_folders};
use crate::datasets::testbed::{generate_synthetic_testbed, TestbedConfig};
use crate::datasets::{build_task_split, TaskId, TaskSpec};
use crate::domain::Split;
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate, render_markdown, trajectory_csv, trajectory_report, EvalOptions,
};
use crate::feedback::{
    compose_feedback_context, export_review_bundle, ingest_ratings, relative_improvement, Keymap,
    ReviewSource, KEYMAP_FILE,
};
use crate::gateway::{CallStats, GatewayError, ResponseCache};
use crate::inference::is_exhaustion;
use crate::optimizer::{run_two_phase, OptimizationResult};
use crate::run_dir::{read_json, write_atomic, write_json, RunDir};

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_EXHAUSTED: i32 = 4;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TESTBED_FILE: &str = "testbed.json";

#[derive(Debug, Parser)]
#[command(
    name = "descprompt",
    version,
    about = "Describe-then-classify prompt optimization"
)]
pub struct Cli {
    /// Config file (.json or .toml); flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build dataset manifests.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Run two-phase prompt optimization into a run directory.
    Optimize(OptimizeArgs),
    /// Evaluate a run's optimized prompt on a held-out split.
    Evaluate(EvaluateArgs),
    /// Render the iteration trajectory of a run as CSV.
    Report(ReportArgs),
    /// Blinded expert review bundles.
    #[command(subcommand)]
    Review(ReviewCommand),
    /// Inspect or clear a run's response cache.
    #[command(subcommand)]
    Cache(CacheCommand),
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Sample a task split from a catalog, or generate the synthetic testbed.
    Build(DatasetBuildArgs),
}

#[derive(Debug, Args)]
pub struct DatasetBuildArgs {
    /// bracs-n-ic, bracs-dcis-ic, bracs-3class, bach-n-ic, sicap-binary or synthetic.
    #[arg(long)]
    pub task: String,
    /// Dataset root (class folders, or the image directory for sicap-binary).
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Annotation CSV for sicap-binary.
    #[arg(long)]
    pub labels_csv: Option<PathBuf>,
    /// Testbed parameters for the synthetic task (JSON).
    #[arg(long)]
    pub testbed_config: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Prompts retained per iteration.
    #[arg(long)]
    pub b: Option<usize>,
    /// Children per retained prompt.
    #[arg(long)]
    pub l: Option<usize>,
    #[arg(long)]
    pub phase1: Option<usize>,
    #[arg(long)]
    pub phase2: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Expert ratings (ratings.csv) to inject into revisions.
    #[arg(long)]
    pub feedback: Option<PathBuf>,
    /// Keymap for --feedback; defaults to keymap.json beside it.
    #[arg(long)]
    pub keymap: Option<PathBuf>,
    /// Skip the diversity phase.
    #[arg(long)]
    pub single_phase: bool,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    pub split: Split,
    /// Also evaluate the seed prompt.
    #[arg(long)]
    pub with_init: bool,
    /// Also evaluate direct classification without a description.
    #[arg(long)]
    pub zero_shot: bool,
    /// Embed descriptions, report silhouettes and write embeddings.csv.
    #[arg(long)]
    pub silhouette: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum ReviewCommand {
    /// Write bundle.csv and keymap.json for blinded rating.
    Export(ReviewExportArgs),
    /// Validate ratings.csv and print per-source means plus the feedback block.
    Ingest(ReviewIngestArgs),
}

#[derive(Debug, Args)]
pub struct ReviewExportArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    pub split: Split,
    /// Only the optimized prompt's descriptions.
    #[arg(long)]
    pub single_source: bool,
    /// Defaults to `<run>/review`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReviewIngestArgs {
    #[arg(long)]
    pub ratings: PathBuf,
    #[arg(long)]
    pub keymap: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

#[derive(Debug, Subcommand)]
pub enum CacheCommand {
    /// Print hit/miss counts of the last commands and the entry count.
    Stats(CacheArgs),
    /// Remove entries whose key starts with --prefix (all when omitted).
    Clear(CacheClearArgs),
}

#[derive(Debug, Args)]
pub struct CacheArgs {
    #[arg(long)]
    pub run: PathBuf,
}

#[derive(Debug, Args)]
pub struct CacheClearArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value = "")]
    pub prefix: String,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}, expected train or test")),
    }
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_)
        | Error::InvalidManifest(_)
        | Error::InvalidLabelSet(_)
        | Error::InsufficientSamples { .. }
        | Error::InsufficientItems(_)
        | Error::RatingsRejected(_)
        | Error::UnsupportedFormat(_)
        | Error::EmptyPrompt
        | Error::RoleMismatch { .. }
        | Error::Json(_)
        | Error::Gateway(GatewayError::InvalidRequest(_)) => EXIT_VALIDATION,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            EXIT_VALIDATION
        }
        _ if is_exhaustion(e) => EXIT_EXHAUSTED,
        _ => EXIT_RUNTIME,
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let base = match &cli.config {
        Some(p) => {
            let mut c = Config::load(p)?;
            c.absolutize(p.parent().unwrap_or(Path::new(".")));
            c
        }
        None => Config::default(),
    };
    match cli.command {
        Command::Dataset(DatasetCommand::Build(a)) => cmd_dataset_build(&a).map(|_| ()),
        Command::Optimize(a) => cmd_optimize(base, &a).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(&a).map(|_| ()),
        Command::Report(a) => cmd_report(&a).map(|csv| print!("{csv}")),
        Command::Review(ReviewCommand::Export(a)) => cmd_review_export(&a).map(|_| ()),
        Command::Review(ReviewCommand::Ingest(a)) => cmd_review_ingest(&a).map(|s| print!("{s}")),
        Command::Cache(CacheCommand::Stats(a)) => cmd_cache_stats(&a).map(|s| print!("{s}")),
        Command::Cache(CacheCommand::Clear(a)) => {
            cmd_cache_clear(&a).map(|n| println!("removed {n} entries"))
        }
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

/// Writes `<out>/manifest.jsonl` (and `<out>/testbed.json` for the synthetic task).
pub fn cmd_dataset_build(a: &DatasetBuildArgs) -> Result<PathBuf> {
    let task: TaskId = a.task.parse()?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let manifest_path = a.out.join(MANIFEST_FILE);
    let manifest = if task == TaskId::Synthetic {
        let cfg = match &a.testbed_config {
            Some(p) => read_json(p)?,
            None => TestbedConfig::default(),
        };
        let (manifest, testbed) = generate_synthetic_testbed(&cfg, a.seed, TESTBED_FILE)?;
        testbed.save(&a.out.join(TESTBED_FILE))?;
        manifest
    } else {
        let catalog_dir = a
            .catalog
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig(format!("task {task} needs --catalog")))?;
        if !catalog_dir.is_dir() {
            return Err(Error::InvalidConfig(format!(
                "catalog {} does not exist",
                catalog_dir.display()
            )));
        }
        let catalog = match task {
            TaskId::BracsNIc | TaskId::BracsDcisIc | TaskId::Bracs3class => {
                scan_bracs(catalog_dir)?
            }
            TaskId::BachNIc => scan_class_folders(catalog_dir)?,
            TaskId::SicapBinary => {
                let csv = a.labels_csv.as_deref().ok_or_else(|| {
                    Error::InvalidConfig("sicap-binary needs --labels-csv".into())
                })?;
                load_sicap_csv(csv, catalog_dir)?
            }
            TaskId::Synthetic => unreachable!(),
        };
        build_task_split(&catalog, &TaskSpec::for_task(task)?, a.seed)?
    };
    manifest.write(&manifest_path)?;
    println!(
        "{}: {} train / {} test",
        manifest_path.display(),
        manifest.split(Split::Train).count(),
        manifest.split(Split::Test).count()
    );
    Ok(manifest_path)
}

/// Merges flags over the file config.
pub fn optimize_config(mut config: Config, a: &OptimizeArgs) -> Result<Config> {
    if let Some(m) = &a.manifest {
        config.paths.manifest = Some(m.clone());
    }
    if let Some(b) = a.backend {
        config.backend.kind = b;
    }
    if let Some(v) = a.b {
        config.run.b = v;
    }
    if let Some(v) = a.l {
        config.run.l = v;
    }
    if let Some(v) = a.phase1 {
        config.run.n_phase1 = v;
    }
    if let Some(v) = a.phase2 {
        config.run.n_phase2 = v;
    }
    if let Some(v) = a.seed {
        config.run.seed = v;
    }
    if a.single_phase {
        config.run.n_phase1 = 0;
    }
    if let Some(f) = &a.feedback {
        config.feedback.ratings = Some(f.clone());
    }
    if let Some(k) = &a.keymap {
        config.feedback.keymap = Some(k.clone());
    }
    if let Some(c) = &a.cache_dir {
        config.paths.cache_dir = Some(c.clone());
    }
    config.absolutize(&absolute(Path::new("."))?);
    config.validate()?;
    Ok(config)
}

fn record_stats(dir: &RunDir, command: &str, stats: CallStats) -> Result<()> {
    let mut all: BTreeMap<String, CallStats> = if dir.cache_stats().exists() {
        read_json(&dir.cache_stats())?
    } else {
        BTreeMap::new()
    };
    all.insert(command.to_string(), stats);
    write_json(&dir.cache_stats(), &all)
}

fn feedback_context(config: &Config) -> Result<Option<String>> {
    let Some(ratings) = &config.feedback.ratings else {
        return Ok(None);
    };
    let keymap = config
        .feedback
        .keymap
        .clone()
        .unwrap_or_else(|| ratings.parent().unwrap_or(Path::new(".")).join(KEYMAP_FILE));
    let set = ingest_ratings(ratings, &Keymap::load(&keymap)?)?;
    Ok((!set.is_empty()).then(|| compose_feedback_context(&set, config.feedback.k)))
}

/// Runs optimization with the snapshot written to `<out>/config.json`.
pub fn optimize_with_config(config: &Config, out: &Path) -> Result<OptimizationResult> {
    let dir = RunDir::create(out)?;
    write_json(&dir.config(), config)?;
    let session = Session::open(config, Some(&dir.cache()))?;
    let feedback = feedback_context(config)?;
    let train = session.manifest.split_records(Split::Train);
    let result = run_two_phase(
        &config.run,
        &train,
        &session.seed_prompt,
        &session.classifier,
        &session.pipeline,
        &session.lexicon,
        feedback.as_deref(),
        Some(&dir),
    );
    record_stats(&dir, "optimize", session.gateway.stats())?;
    let result = result?;
    let rows = trajectory_report(&result.logs);
    write_atomic(&dir.trajectory_csv(), trajectory_csv(&rows)?.as_bytes())?;
    Ok(result)
}

pub fn cmd_optimize(base: Config, a: &OptimizeArgs) -> Result<OptimizationResult> {
    let config = optimize_config(base, a)?;
    let result = optimize_with_config(&config, &a.out)?;
    println!(
        "q* {} train accuracy {:.4} after {} iterations{}",
        result.q_star.short_id(),
        result.q_star_train_accuracy,
        result.logs.len().saturating_sub(1),
        if result.early_stopped {
            " (early stop)"
        } else {
            ""
        }
    );
    println!("{}", result.q_star.text);
    Ok(result)
}

pub struct EvaluateRequest {
    pub split: Split,
    pub with_init: bool,
    pub zero_shot: bool,
    pub silhouette: bool,
}

/// Evaluates a finished run from its config snapshot and result.json.
pub fn evaluate_run(run: &Path, req: &EvaluateRequest) -> Result<crate::evaluation::EvalReport> {
    let dir = RunDir::new(run);
    let config = Config::from_run_dir(&dir)?;
    let result: OptimizationResult = read_json(&dir.result())?;
    let session = Session::open(&config, Some(&dir.cache()))?;
    let records = session.manifest.split_records(req.split);
    let options = EvalOptions {
        initial: req.with_init.then(|| result.seed_prompt.clone()),
        zero_shot: req.zero_shot,
        silhouette: req.silhouette,
        resamples: config.evaluation.resamples,
        level: config.evaluation.level,
        seed: config.evaluation.seed,
        manifest_seed: Some(session.manifest.provenance.seed),
        run_seed: Some(config.run.seed),
    };
    let outcome = evaluate(
        &session.manifest.task,
        &records,
        &result.classifier_prompt,
        &result.q_star,
        &session.pipeline,
        &options,
    );
    record_stats(&dir, "evaluate", session.gateway.stats())?;
    let evaluation = outcome?;
    write_json(&dir.report_json(), &evaluation.report)?;
    write_atomic(
        &dir.report_md(),
        render_markdown(&evaluation.report).as_bytes(),
    )?;
    if let Some(m) = &evaluation.embeddings {
        m.write_csv(&dir.embeddings_csv())?;
    }
    Ok(evaluation.report)
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<crate::evaluation::EvalReport> {
    let report = evaluate_run(
        &a.run,
        &EvaluateRequest {
            split: a.split,
            with_init: a.with_init,
            zero_shot: a.zero_shot,
            silhouette: a.silhouette,
        },
    )?;
    print!("{}", render_markdown(&report));
    Ok(report)
}

/// Trajectory CSV; also written to `<run>/trajectory.csv`.
pub fn cmd_report(a: &ReportArgs) -> Result<String> {
    let dir = RunDir::new(&a.run);
    let result: OptimizationResult = read_json(&dir.result())?;
    let csv = trajectory_csv(&trajectory_report(&result.logs))?;
    write_atomic(&dir.trajectory_csv(), csv.as_bytes())?;
    Ok(csv)
}

pub fn cmd_review_export(a: &ReviewExportArgs) -> Result<PathBuf> {
    let dir = RunDir::new(&a.run);
    let config = Config::from_run_dir(&dir)?;
    let result: OptimizationResult = read_json(&dir.result())?;
    let session = Session::open(&config, Some(&dir.cache()))?;
    let records = session.manifest.split_records(a.split);
    let mut prompts = vec![result.q_star.clone()];
    if !a.single_source && result.seed_prompt.id != result.q_star.id {
        prompts.push(result.seed_prompt.clone());
    }
    let mut sources = Vec::new();
    for q in &prompts {
        for r in &records {
            sources.push(ReviewSource {
                description: session.pipeline.generate_description(r, q)?,
                image_ref: r.image_ref.clone(),
            });
        }
    }
    let out = a.out.clone().unwrap_or_else(|| dir.review());
    let bundle = export_review_bundle(&sources, a.n, a.seed, prompts.len() > 1, &out)?;
    record_stats(&dir, "review-export", session.gateway.stats())?;
    println!(
        "bundle {} with {} items in {}",
        bundle.bundle_id,
        bundle.items.len(),
        out.display()
    );
    Ok(out)
}

pub fn cmd_review_ingest(a: &ReviewIngestArgs) -> Result<String> {
    let keymap = a.keymap.clone().unwrap_or_else(|| {
        a.ratings
            .parent()
            .unwrap_or(Path::new("."))
            .join(KEYMAP_FILE)
    });
    let set = ingest_ratings(&a.ratings, &Keymap::load(&keymap)?)?;
    let mut out = format!("{} ratings\n", set.len());
    for (source, s) in &set.per_source {
        out.push_str(&format!(
            "source {source}: n={} mean precision {:.3} mean accuracy {:.3}\n",
            s.n, s.mean_precision, s.mean_accuracy
        ));
    }
    let means: Vec<f64> = set.per_source.values().map(|s| s.mean_accuracy).collect();
    if means.len() == 2 && means[0] > 0.0 {
        out.push_str(&format!(
            "relative accuracy change (second vs first): {:+.1}%\n",
            relative_improvement(means[0], means[1]) * 100.0
        ));
    }
    if !set.is_empty() {
        out.push('\n');
        out.push_str(&compose_feedback_context(&set, a.k));
    }
    Ok(out)
}

fn run_cache(dir: &RunDir) -> Result<ResponseCache> {
    let cache_dir = match Config::from_run_dir(dir) {
        Ok(c) => c.paths.cache_dir.unwrap_or_else(|| dir.cache()),
        Err(_) => dir.cache(),
    };
    ResponseCache::open(cache_dir)
}

pub fn cmd_cache_stats(a: &CacheArgs) -> Result<String> {
    let dir = RunDir::new(&a.run);
    let cache = run_cache(&dir)?;
    let mut out = format!("entries: {}\n", cache.len());
    if dir.cache_stats().exists() {
        let all: BTreeMap<String, CallStats> = read_json(&dir.cache_stats())?;
        for (cmd, s) in all {
            out.push_str(&format!(
                "{cmd}: hits {} misses {} total {} backend calls {} failures {}\n",
                s.cache_hits,
                s.cache_misses,
                s.cache_hits + s.cache_misses,
                s.calls,
                s.failures
            ));
        }
    }
    Ok(out)
}

pub fn cmd_cache_clear(a: &CacheClearArgs) -> Result<usize> {
    run_cache(&RunDir::new(&a.run))?.clear(&a.prefix)
}
