//! Command-line front end. Commands exchange data only through files.

mod config;

pub use config::{load_corpus_files, ProjectConfig};

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use crate::configsearch::{self, GroupingOptions, ScoreMatrix, SelectOptions};
use crate::corpus::{Corpus, Instance, Split};
use crate::embeddings::{self, FetchOptions, Space};
use crate::ensemble::{self, Plan};
use crate::inference::{self, Prediction, RunCache, RunConfig, RunContext};
use crate::metrics::{self, SliceBy};

#[derive(Debug, Parser)]
#[command(name = "figqa", version, about = "Few-shot figure question answering pipeline")]
pub struct Cli {
    /// Project file (TOML).
    #[arg(short, long, global = true, env = "FIGQA_PROJECT")]
    pub project: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate corpus files and print per-type counts.
    Ingest(IngestArgs),
    /// Run one or more configurations, appending to the run cache.
    Run(RunArgs),
    /// Apply a routing plan to cached predictions and write a submission.
    Ensemble(EnsembleArgs),
    /// ROUGE scores of a submission or a cached configuration.
    Evaluate(EvaluateArgs),
    /// Confidence calibration of a cached configuration.
    Calibrate(CalibrateArgs),
    /// Build a type-table plan by repeated k-fold selection.
    SelectConfig(SelectConfigArgs),
    /// Request embeddings from the embedding service.
    FetchEmbeddings(FetchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    /// Train and validation.
    Dev,
    Train,
    Validation,
    Test,
    All,
}

impl SplitArg {
    fn admits(self, split: Split) -> bool {
        match self {
            SplitArg::Dev => split.is_dev(),
            SplitArg::Train => split == Split::Train,
            SplitArg::Validation => split == Split::Validation,
            SplitArg::Test => split == Split::Test,
            SplitArg::All => true,
        }
    }
}

#[derive(Debug, Args)]
pub struct Selection {
    #[arg(long, value_enum, default_value = "dev")]
    pub split: SplitArg,
    /// File with one instance id per line; overrides --split.
    #[arg(long)]
    pub instances: Option<PathBuf>,
    /// Keep only the first N selected instances.
    #[arg(long)]
    pub limit: Option<usize>,
}

impl Selection {
    fn ids(&self, corpus: &Corpus) -> Result<Vec<String>> {
        let mut ids: Vec<String> = match &self.instances {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("cannot read {}", path.display()))?;
                let ids: Vec<String> = text
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(str::to_string)
                    .collect();
                if let Some(bad) = ids.iter().find(|id| corpus.get(id).is_none()) {
                    bail!("unknown instance '{bad}' in {}", path.display());
                }
                ids
            }
            None => corpus
                .instances()
                .iter()
                .filter(|i| self.split.admits(i.split))
                .map(|i| i.instance_id.clone())
                .collect(),
        };
        if let Some(n) = self.limit {
            ids.truncate(n);
        }
        if ids.is_empty() {
            bail!("no instances selected");
        }
        Ok(ids)
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Corpus files; defaults to the project's corpus.
    #[arg(long = "input")]
    pub inputs: Vec<PathBuf>,
    /// Write the validated corpus as normalized JSONL.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Configuration ids such as `internvl:1s_q_img_f`; repeatable.
    #[arg(long = "config", required = true)]
    pub configs: Vec<String>,
    /// Registry backend to use instead of the one named in the config id.
    #[arg(long)]
    pub backend: Option<String>,
    #[command(flatten)]
    pub selection: Selection,
    /// Re-query instances already in the cache.
    #[arg(long)]
    pub force: bool,
    /// Write the per-instance failure report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Plan name from the project file, a plan path, or one of
    /// `default-confidence` / `default-type-table`.
    #[arg(long)]
    pub plan: String,
    /// Override the confidence threshold of a confidence plan.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub selection: Selection,
    /// Submission JSONL.
    #[arg(long)]
    pub output: PathBuf,
    /// Per-stage provenance counts as JSON.
    #[arg(long)]
    pub provenance: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Submission JSONL to score.
    #[arg(long, conflicts_with = "config")]
    pub predictions: Option<PathBuf>,
    /// Cached configuration to score.
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long, default_value = "question_type")]
    pub slice: SliceBy,
    /// JSON map of instance id to precomputed BERTScore.
    #[arg(long)]
    pub bertscore: Option<PathBuf>,
    #[command(flatten)]
    pub selection: Selection,
    /// Report JSON.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub config: String,
    /// Ascending bin edges.
    #[arg(long, value_delimiter = ',')]
    pub edges: Option<Vec<f64>>,
    #[command(flatten)]
    pub selection: Selection,
    /// Report JSON.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectConfigArgs {
    /// Score matrix CSV (`instance_id,<config>...`).
    #[arg(long, conflicts_with = "configs")]
    pub matrix: Option<PathBuf>,
    /// Build the matrix from cached runs of these configurations.
    #[arg(long, value_delimiter = ',')]
    pub configs: Vec<String>,
    /// Save the matrix built from caches.
    #[arg(long)]
    pub write_matrix: Option<PathBuf>,
    /// Defaults to the project seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0.02)]
    pub others_threshold: f64,
    /// Figure type split by question type; defaults to the most frequent.
    #[arg(long)]
    pub split_type: Option<String>,
    /// Plan JSON.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    #[arg(long)]
    pub space: Space,
    /// Service base URL; defaults to the project's `embed_endpoint`.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[command(flatten)]
    pub selection: Selection,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 120)]
    pub timeout_secs: u64,
    /// Embedding JSONL to write.
    #[arg(long)]
    pub output: PathBuf,
}

pub fn execute(cli: Cli) -> Result<()> {
    let project = || -> Result<ProjectConfig> {
        let path = cli
            .project
            .as_deref()
            .ok_or_else(|| anyhow!("this command needs a project file (--project or FIGQA_PROJECT)"))?;
        ProjectConfig::load(path)
    };
    match &cli.command {
        Command::Ingest(a) => {
            let corpus = if a.inputs.is_empty() {
                project()?.load_corpus()?
            } else {
                load_corpus_files(&a.inputs)?
            };
            ingest(&corpus, a)
        }
        Command::Run(a) => run(&project()?, a),
        Command::Ensemble(a) => ensemble(&project()?, a),
        Command::Evaluate(a) => evaluate(&project()?, a),
        Command::Calibrate(a) => calibrate(&project()?, a),
        Command::SelectConfig(a) => select_config(&project()?, a),
        Command::FetchEmbeddings(a) => fetch(&project()?, a),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn ingest(corpus: &Corpus, a: &IngestArgs) -> Result<()> {
    let qt = corpus.question_type_counts();
    let ft = corpus.figure_type_counts();
    println!(
        "{} instances, {} question types, {} figure types, {} images",
        corpus.len(),
        qt.len(),
        ft.len(),
        corpus.image_count()
    );
    println!("question types:");
    for (k, n) in &qt {
        println!("  {:<22} {n}", k.to_string());
    }
    println!("figure types:");
    for (k, n) in &ft {
        println!("  {:<22} {n}", k.to_string());
    }
    if let Some(out) = &a.output {
        corpus
            .write_jsonl(out)
            .with_context(|| format!("cannot write {}", out.display()))?;
    }
    Ok(())
}

/// Exclusive lock on the cache directory for the life of the guard.
fn lock_cache_dir(dir: &Path) -> Result<File> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join(".lock");
    let f = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    f.try_lock()
        .map_err(|_| anyhow!("cache directory {} is in use by another process", dir.display()))?;
    Ok(f)
}

fn run(p: &ProjectConfig, a: &RunArgs) -> Result<()> {
    let corpus = p.load_corpus()?;
    let store = p.load_embeddings()?;
    let ids = a.selection.ids(&corpus)?;
    let configs = a
        .configs
        .iter()
        .map(|c| c.parse::<RunConfig>())
        .collect::<Result<Vec<_>, _>>()?;
    let _lock = lock_cache_dir(&p.cache_dir)?;
    let mut failures = BTreeMap::new();
    for config in &configs {
        let name = a.backend.as_deref().unwrap_or(&config.backend);
        let spec = p
            .backends
            .get(name)
            .ok_or_else(|| anyhow!("backend '{name}' is not in the project's [backends]"))?;
        let backend = spec.build(name, &p.image_root, &p.decode)?;
        let id = config.config_id();
        let mut cache = RunCache::open(&p.cache_path(&id))?;
        let ctx = RunContext {
            corpus: &corpus,
            store: &store,
            backend: backend.as_ref(),
            params: &p.decode,
            concurrency: p.concurrency,
            force: a.force,
        };
        let report = inference::run_config(&ctx, config, &ids, &mut cache)?;
        println!(
            "{id}: {} predictions ({} new, {} cached), {} failures",
            report.predictions.len(),
            report.predictions.len() - report.cached,
            report.cached,
            report.failures.len()
        );
        if !report.failures.is_empty() {
            failures.insert(id, report.failures);
        }
    }
    if let Some(path) = &a.report {
        write_json(path, &serde_json::to_value(&failures)?)?;
    }
    let total: usize = failures.values().map(Vec::len).sum();
    if total > 0 {
        bail!("{total} instance(s) failed");
    }
    Ok(())
}

fn load_plan(p: &ProjectConfig, name: &str) -> Result<Plan> {
    Ok(match name {
        "default-confidence" => Plan::Confidence(ensemble::default_confidence_plan()),
        "default-type-table" => Plan::TypeTable(ensemble::default_type_table_plan()),
        other => Plan::load(&p.plan_path(other))?,
    })
}

/// Opens the caches of the given configurations; each must already exist.
fn open_caches<I: IntoIterator<Item = String>>(p: &ProjectConfig, ids: I) -> Result<Vec<RunCache>> {
    ids.into_iter()
        .map(|id| {
            let path = p.cache_path(&id);
            if !path.exists() {
                bail!("no cache for config '{id}' (expected {})", path.display());
            }
            Ok(RunCache::open(&path)?)
        })
        .collect()
}

fn ensemble(p: &ProjectConfig, a: &EnsembleArgs) -> Result<()> {
    let corpus = p.load_corpus()?;
    let ids = a.selection.ids(&corpus)?;
    let mut plan = load_plan(p, &a.plan)?;
    if let Some(t) = a.threshold {
        match &mut plan {
            Plan::Confidence(c) => c.threshold = t,
            Plan::TypeTable(_) => bail!("--threshold applies only to confidence plans"),
        }
    }
    let caches = open_caches(p, plan.config_ids())?;
    let out = ensemble::apply_plan(&plan, &caches, &corpus, &ids)?;
    let coverage = ensemble::coverage_check(&out, &ids);
    if !coverage.is_complete() {
        bail!(
            "incomplete submission: {} gaps, {} duplicates, {} extras",
            coverage.gaps.len(),
            coverage.duplicates.len(),
            coverage.extras.len()
        );
    }
    ensemble::write_submission(&a.output, &out)?;
    for (k, n) in &out.provenance {
        println!("{k}: {n}");
    }
    if let Some(path) = &a.provenance {
        write_json(path, &serde_json::to_value(&out.provenance)?)?;
    }
    Ok(())
}

fn cached_predictions(p: &ProjectConfig, config: &str, ids: &[String]) -> Result<Vec<Prediction>> {
    let caches = open_caches(p, [config.to_string()])?;
    ids.iter()
        .map(|id| {
            caches[0]
                .get(id, config)
                .cloned()
                .ok_or_else(|| anyhow!("no cached prediction for '{id}' under '{config}'"))
        })
        .collect()
}

fn evaluate(p: &ProjectConfig, a: &EvaluateArgs) -> Result<()> {
    let corpus = p.load_corpus()?;
    let bertscore = a.bertscore.as_deref().map(metrics::load_bertscore).transpose()?;
    let (source, slices, overall, refusal_precision) = match (&a.predictions, &a.config) {
        (Some(path), None) => {
            let rows = ensemble::read_submission(path)?;
            let slices = metrics::aggregate_with_bertscore(&rows, &corpus, a.slice, bertscore.as_ref())?;
            let overall = metrics::aggregate_with_bertscore(&rows, &corpus, SliceBy::None, bertscore.as_ref())?;
            (path.display().to_string(), slices, overall, None)
        }
        (None, Some(config)) => {
            let ids = a.selection.ids(&corpus)?;
            let preds = cached_predictions(p, config, &ids)?;
            let slices = metrics::aggregate_with_bertscore(&preds, &corpus, a.slice, bertscore.as_ref())?;
            let overall = metrics::aggregate_with_bertscore(&preds, &corpus, SliceBy::None, bertscore.as_ref())?;
            let refusal = metrics::unanswerable_precision(&preds, &corpus).ok();
            (config.clone(), slices, overall, refusal)
        }
        _ => bail!("pass exactly one of --predictions or --config"),
    };
    print!("{}", metrics::slices_table(&overall));
    print!("{}", metrics::slices_table(&slices));
    if let Some(path) = &a.output {
        write_json(
            path,
            &json!({
                "source": source,
                "slice_by": a.slice,
                "overall": overall.get("all"),
                "slices": slices,
                "unanswerable_precision": refusal_precision,
            }),
        )?;
    }
    Ok(())
}

fn calibrate(p: &ProjectConfig, a: &CalibrateArgs) -> Result<()> {
    let corpus = p.load_corpus()?;
    let ids = a.selection.ids(&corpus)?;
    let preds = cached_predictions(p, &a.config, &ids)?;
    let edges = a.edges.clone().unwrap_or_else(|| metrics::DEFAULT_EDGES.to_vec());
    let report = metrics::calibration(&preds, &corpus, &edges)?;
    print!("{}", metrics::calibration_table(&report));
    if let Some(path) = &a.output {
        write_json(path, &json!({"config": a.config, "report": report}))?;
    }
    Ok(())
}

fn select_config(p: &ProjectConfig, a: &SelectConfigArgs) -> Result<()> {
    let corpus = p.load_corpus()?;
    let matrix = match &a.matrix {
        Some(path) => ScoreMatrix::load_csv(path)
            .with_context(|| format!("reading score matrix {}", path.display()))?,
        None => {
            if a.configs.is_empty() {
                bail!("pass --matrix or --configs");
            }
            let ids: Vec<String> = corpus.dev_pool().map(|i| i.instance_id.clone()).collect();
            let caches = open_caches(p, a.configs.iter().cloned())?;
            ScoreMatrix::from_caches(&caches, &corpus, &ids, &a.configs)?
        }
    };
    if let Some(path) = &a.write_matrix {
        matrix.save_csv(path)?;
    }
    let seed = a.seed.unwrap_or(p.seed);
    let grouping = GroupingOptions {
        others_threshold: a.others_threshold,
        split_type: a.split_type.clone(),
    };
    let opts = SelectOptions {
        folds: a.folds,
        ..SelectOptions::default()
    };
    let (plan, diag) = configsearch::build_type_table(&matrix, &corpus, &grouping, &opts, seed)?;
    for (group, d) in &diag.groups {
        info!("{group}: {} instances, winner {} after {} repeats", d.size, d.winner, d.repeat_count);
    }
    fs::write(&a.output, Plan::TypeTable(plan).to_json() + "\n")
        .with_context(|| format!("cannot write {}", a.output.display()))?;
    if let Some(path) = &a.diagnostics {
        write_json(path, &serde_json::to_value(&diag)?)?;
    }
    println!("{} groups", diag.groups.len());
    Ok(())
}

fn fetch(p: &ProjectConfig, a: &FetchArgs) -> Result<()> {
    let corpus = p.load_corpus()?;
    let ids = a.selection.ids(&corpus)?;
    let endpoint = a
        .endpoint
        .clone()
        .or_else(|| p.embed_endpoint.clone())
        .ok_or_else(|| anyhow!("no endpoint: pass --endpoint or set embed_endpoint"))?;
    let instances: Vec<&Instance> = ids.iter().map(|id| corpus.require(id)).collect::<Result<_, _>>()?;
    let opts = FetchOptions {
        batch_size: a.batch_size,
        concurrency: p.concurrency,
        timeout: Duration::from_secs(a.timeout_secs),
        image_root: p.image_root.clone(),
    };
    let records = embeddings::fetch_embeddings(&endpoint, &instances, a.space, None, &opts)?;
    embeddings::write_jsonl(&a.output, &records)?;
    println!("{} vectors written to {}", records.len(), a.output.display());
    Ok(())
}

/// Parses arguments, runs the command and maps errors to exit code 1.
pub fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match execute(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e:#}");
            std::process::ExitCode::from(1)
        }
    }
}
