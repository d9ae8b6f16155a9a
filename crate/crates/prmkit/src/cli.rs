//! The `prmkit` binary: the data pipeline and inference workflows as
//! subcommands over JSONL artifacts.
//!
//! Every command writes a manifest beside its primary output recording the
//! invocation, resolved seed, input/output paths, record counts, and
//! wall-clock timestamps. Timestamps live only in manifests, so a rerun with
//! the same seed reproduces every other artifact byte for byte, regardless
//! of `--jobs`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufReader, BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{AggregateError, AggregationMethod};
use crate::backends::{
    http_chat, mock_first_bad, BackendError, GenParams, GeneratorContract, HttpBackend,
    HttpBackendConfig, MockGenerator, MockScorer, MockWorldConfig, ScorerContract,
};
use crate::domain::{
    read_cot_pool, write_cot_pool, write_jsonl, ChainOfThought, DomainError, GenMeta, JsonlError,
    Question, RewardVector, Step,
};
use crate::pipeline::{
    apply_counterfactual, apply_rewrite, apply_step_labels, build_autolabel_prompt,
    build_counterfactual_prompt, build_rewrite_prompt, export_training_records,
    parse_autolabel_output, parse_counterfactual_output, parse_rewrite_output,
    read_labeled_dataset, read_scored_pool, render_autolabel_output,
    render_counterfactual_output, render_rewrite_output, sample_error_types, self_filter,
    write_labeled_dataset, write_scored_pool, write_training_records, CotSource, LabeledEntry,
    PipelineError, ScoredCoT, SelfFilterConfig, DEFAULT_COTS_PER_QUESTION,
};
use crate::rerank::{accuracy_at_n, CandidatePool, RerankError, Selector};
use crate::report::{bootstrap_ci, emit_report, MetricsRow, ReportError, ReportFormat};
use crate::search::{beam_search, mcts, BeamConfig, MctsConfig, SearchError};
use crate::seeding::{derive_rng, hash_str, mix};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Data {
        path: String,
        #[source]
        source: JsonlError,
    },
    #[error("failed to read {path}: {source}")]
    ReadIo {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("failed to write {path}: {source}")]
    WriteIo {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error("unknown question id {0:?}")]
    UnknownQuestion(String),
    #[error("duplicate question id {0:?}")]
    DuplicateQuestion(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Rerank(#[from] RerankError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

impl CliError {
    /// Exit code policy: 2 for invocation problems, 1 for everything else.
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Invalid(_) => 2,
            _ => 1,
        }
    }
}

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

/// Provenance record written beside every command's primary output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub seed: u64,
    pub jobs: usize,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub records_in: u64,
    pub records_out: u64,
    pub records_dropped: u64,
    pub started: String,
    pub finished: String,
}

impl RunManifest {
    /// Counts must balance exactly.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.records_in != self.records_out + self.records_dropped {
            return Err(CliError::Internal(format!(
                "manifest counts do not balance: {} in != {} out + {} dropped",
                self.records_in, self.records_out, self.records_dropped
            )));
        }
        Ok(())
    }
}

/// `<primary>.manifest.json` next to the primary output.
pub fn manifest_path(primary: &Path) -> PathBuf {
    let name = primary
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_owned());
    primary.with_file_name(format!("{name}.manifest.json"))
}

fn now_rfc3339() -> String {
    chrono::Utc::now()
        .to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "prmkit",
    version,
    about = "PRM-guided test-time inference and synthetic reasoning-data pipeline"
)]
struct Cli {
    /// Base RNG seed; every random choice in a run derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-question parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// TOML config file merged under the flags; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Which generator/scorer backend to use.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    /// HTTP backend: service base URL.
    #[arg(long, global = true)]
    base_url: Option<String>,
    /// HTTP backend: model identifier sent in request bodies.
    #[arg(long, global = true)]
    model: Option<String>,
    /// HTTP backend: environment variable holding the API key.
    #[arg(long, global = true)]
    api_key_env: Option<String>,
    /// Mock backend: children per node.
    #[arg(long, global = true)]
    mock_branching: Option<usize>,
    /// Mock backend: terminal depth.
    #[arg(long, global = true)]
    mock_depth: Option<usize>,
    /// Mock backend: fraction of terminals designated correct.
    #[arg(long, global = true)]
    mock_density: Option<f64>,
    /// Mock backend: half-width of the uniform score noise.
    #[arg(long, global = true)]
    mock_noise: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AugmentKind {
    Counterfactual,
    Rewrite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SearchMethodArg {
    Beam,
    Mcts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> ReportFormat {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

fn parse_selector(s: &str) -> Result<Selector, String> {
    s.parse().map_err(|e: RerankError| e.to_string())
}

fn parse_agg(s: &str) -> Result<AggregationMethod, String> {
    s.parse().map_err(|e: AggregateError| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample chains of thought for each question.
    Generate {
        /// Questions file (JSONL).
        #[arg(long)]
        questions: PathBuf,
        /// Sampled chains output (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Samples per question.
        #[arg(long)]
        n: Option<usize>,
        /// Drop sampled chains longer than this many steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Locate each chain's first bad step and convert it to step labels.
    Label {
        /// Chains to label (JSONL from `generate`).
        #[arg(long)]
        cots: PathBuf,
        /// Questions file (JSONL).
        #[arg(long)]
        questions: PathBuf,
        /// Labeled chains output (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Ablated labeling: omit the ground-truth answer from the prompts.
        #[arg(long)]
        no_ground_truth: bool,
    },
    /// Manufacture extra labeled chains from an existing labeled set.
    Augment {
        /// Augmentation strategy.
        #[arg(long, value_enum)]
        kind: AugmentKind,
        /// Labeled chains input (JSONL from `label`).
        #[arg(long)]
        labeled: PathBuf,
        /// Questions file (JSONL).
        #[arg(long)]
        questions: PathBuf,
        /// Augmented labeled chains output (JSONL).
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop labeled chains whose scores deviate from their label targets.
    Filter {
        /// Labeled chains input (JSONL).
        #[arg(long)]
        labeled: PathBuf,
        /// Questions file (JSONL).
        #[arg(long)]
        questions: PathBuf,
        /// Surviving labeled chains output (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Maximum tolerated |score - target| per step.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Export labeled chains as classification-token training records.
    ExportTrain {
        /// Labeled chains input (JSONL).
        #[arg(long)]
        labeled: PathBuf,
        /// Questions file (JSONL).
        #[arg(long)]
        questions: PathBuf,
        /// Training records output (JSONL).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score each chain's steps with the process reward model.
    Score {
        /// Chains to score (JSONL).
        #[arg(long)]
        cots: PathBuf,
        /// Questions file (JSONL).
        #[arg(long)]
        questions: PathBuf,
        /// Scored pool output (JSONL).
        #[arg(long)]
        out: PathBuf,
    },
    /// Select one answer per question from a candidate pool.
    Rerank {
        /// Pre-scored pool (JSONL of chains with reward vectors).
        #[arg(long, conflicts_with = "cots", required_unless_present = "cots")]
        pool: Option<PathBuf>,
        /// Unscored chains; scores are computed with the backend first.
        #[arg(long)]
        cots: Option<PathBuf>,
        /// Questions file (JSONL).
        #[arg(long)]
        questions: PathBuf,
        /// Answer selector: mv, wmv, or bon.
        #[arg(long, value_parser = parse_selector)]
        selector: Option<Selector>,
        /// Step-score aggregation: min, last, or avg.
        #[arg(long, value_parser = parse_agg)]
        agg: Option<AggregationMethod>,
        /// Keep only the first N candidates of each pool.
        #[arg(long)]
        n: Option<usize>,
        /// Per-question picks CSV.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-category metrics rows (JSON) for `report`.
        #[arg(long)]
        rows: Option<PathBuf>,
        /// Bootstrap resamples for the metrics-row confidence intervals.
        #[arg(long)]
        resamples: Option<usize>,
    },
    /// Grow one chain per question with PRM-guided search.
    Search {
        /// Questions file (JSONL).
        #[arg(long)]
        questions: PathBuf,
        /// Search algorithm.
        #[arg(long, value_enum)]
        method: SearchMethodArg,
        /// Step-score aggregation: min, last, or avg.
        #[arg(long, value_parser = parse_agg)]
        agg: Option<AggregationMethod>,
        /// Per-question search rows output (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Beam: candidate chains kept per round.
        #[arg(long)]
        n_beams: Option<usize>,
        /// Beam: continuations sampled per kept chain.
        #[arg(long)]
        width: Option<usize>,
        /// MCTS: iteration budget.
        #[arg(long)]
        rollouts: Option<usize>,
        /// MCTS: children expanded per node.
        #[arg(long)]
        branch: Option<usize>,
        /// MCTS: UCT exploration weight.
        #[arg(long)]
        explore_weight: Option<f64>,
        /// Abandon chains that exceed this many steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Sweep selectors, aggregations, and pool sizes over a scored pool.
    Eval {
        /// Pre-scored pool (JSONL from `score`).
        #[arg(long)]
        pool: PathBuf,
        /// Questions file (JSONL).
        #[arg(long)]
        questions: PathBuf,
        /// Pool sizes to evaluate, comma-separated.
        #[arg(long, value_delimiter = ',', required = true)]
        ns: Vec<usize>,
        /// Selectors to evaluate (default: all).
        #[arg(long, value_delimiter = ',')]
        selectors: Vec<String>,
        /// Aggregations to evaluate (default: all).
        #[arg(long, value_delimiter = ',')]
        aggs: Vec<String>,
        /// Subsampling resamples per (question, N).
        #[arg(long)]
        resamples: Option<usize>,
        /// Metrics rows output (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Render metrics rows as a report table and optional charts.
    Report {
        /// Metrics rows (JSON) from `eval` or `rerank --rows`.
        #[arg(long)]
        rows: PathBuf,
        /// Report table format.
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        /// Also emit one SVG chart per (category, selector).
        #[arg(long)]
        plot: bool,
        /// Directory receiving the report table and charts.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Label { .. } => "label",
            Command::Augment { .. } => "augment",
            Command::Filter { .. } => "filter",
            Command::ExportTrain { .. } => "export-train",
            Command::Score { .. } => "score",
            Command::Rerank { .. } => "rerank",
            Command::Search { .. } => "search",
            Command::Eval { .. } => "eval",
            Command::Report { .. } => "report",
        }
    }
}

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

/// Flat TOML key/value table merged under the flags.
struct FileConfig(toml::Table);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<(FileConfig, Option<String>), CliError> {
        let Some(path) = path else {
            return Ok((FileConfig(toml::Table::new()), None));
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok((FileConfig(table), Some(path.display().to_string())))
    }

    fn u64(&self, key: &str) -> Result<Option<u64>, CliError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(toml::Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(v) => Err(bad_key(key, "a nonnegative integer", v)),
        }
    }

    fn usize(&self, key: &str) -> Result<Option<usize>, CliError> {
        Ok(self.u64(key)?.map(|v| v as usize))
    }

    fn f64(&self, key: &str) -> Result<Option<f64>, CliError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(toml::Value::Float(f)) => Ok(Some(*f)),
            Some(toml::Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(v) => Err(bad_key(key, "a number", v)),
        }
    }

    fn string(&self, key: &str) -> Result<Option<String>, CliError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => Err(bad_key(key, "a string", v)),
        }
    }

    fn bool(&self, key: &str) -> Result<Option<bool>, CliError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(toml::Value::Boolean(b)) => Ok(Some(*b)),
            Some(v) => Err(bad_key(key, "a boolean", v)),
        }
    }
}

fn bad_key(key: &str, expected: &str, got: &toml::Value) -> CliError {
    CliError::Config(format!("key {key:?}: expected {expected}, got {got}"))
}

// ---------------------------------------------------------------------------
// Resolved run context
// ---------------------------------------------------------------------------

enum Backend {
    Mock(MockWorldConfig),
    Http(HttpBackendConfig),
}

impl Backend {
    fn model_id(&self) -> &str {
        match self {
            Backend::Mock(_) => "mock",
            Backend::Http(cfg) => &cfg.model_id,
        }
    }

    fn generator(&self) -> Result<Box<dyn GeneratorContract + Send + Sync>, CliError> {
        Ok(match self {
            Backend::Mock(world) => Box::new(MockGenerator::per_question(world.clone())),
            Backend::Http(cfg) => Box::new(HttpBackend::new(cfg.clone())?),
        })
    }

    fn scorer(&self) -> Result<Box<dyn ScorerContract + Send + Sync>, CliError> {
        Ok(match self {
            Backend::Mock(world) => Box::new(MockScorer::per_question(world.clone())),
            Backend::Http(cfg) => Box::new(HttpBackend::new(cfg.clone())?),
        })
    }
}

struct Globals {
    seed: u64,
    jobs: usize,
    config_path: Option<String>,
    backend: Backend,
}

/// The mock world a run with base seed `seed` samples from, before
/// per-question derivation. Exposed so tests and fixtures can construct
/// question files whose truths match what the pipeline will generate.
pub fn mock_world_for_seed(seed: u64) -> MockWorldConfig {
    MockWorldConfig {
        seed: mix(seed, &[hash_str("mock-world")]),
        ..MockWorldConfig::default()
    }
}

fn resolve_globals(cli: &Cli, cfg: &FileConfig, config_path: Option<String>) -> Result<Globals, CliError> {
    let seed = match cli.seed {
        Some(s) => s,
        None => cfg.u64("seed")?.unwrap_or(0),
    };
    let jobs = cli.jobs.or(cfg.usize("jobs")?).unwrap_or(1).max(1);

    let kind = match cli.backend {
        Some(k) => k,
        None => match cfg.string("backend")?.as_deref() {
            None | Some("mock") => BackendKind::Mock,
            Some("http") => BackendKind::Http,
            Some(other) => {
                return Err(CliError::Config(format!(
                    "key \"backend\": expected \"mock\" or \"http\", got {other:?}"
                )))
            }
        },
    };

    let backend = match kind {
        BackendKind::Mock => {
            let defaults = mock_world_for_seed(seed);
            Backend::Mock(MockWorldConfig {
                branching: cli
                    .mock_branching
                    .or(cfg.usize("mock_branching")?)
                    .unwrap_or(defaults.branching),
                depth: cli
                    .mock_depth
                    .or(cfg.usize("mock_depth")?)
                    .unwrap_or(defaults.depth),
                correct_path_density: cli
                    .mock_density
                    .or(cfg.f64("mock_density")?)
                    .unwrap_or(defaults.correct_path_density),
                score_correct_mean: cfg
                    .f64("mock_correct_mean")?
                    .unwrap_or(defaults.score_correct_mean),
                score_incorrect_mean: cfg
                    .f64("mock_incorrect_mean")?
                    .unwrap_or(defaults.score_incorrect_mean),
                score_noise: cli
                    .mock_noise
                    .or(cfg.f64("mock_noise")?)
                    .unwrap_or(defaults.score_noise),
                seed: defaults.seed,
            })
        }
        BackendKind::Http => {
            let base_url = cli
                .base_url
                .clone()
                .or(cfg.string("base_url")?)
                .ok_or_else(|| CliError::Invalid("the http backend requires --base-url".into()))?;
            let model = cli
                .model
                .clone()
                .or(cfg.string("model")?)
                .ok_or_else(|| CliError::Invalid("the http backend requires --model".into()))?;
            let mut http = HttpBackendConfig::new(base_url, model);
            if let Some(env) = cli.api_key_env.clone().or(cfg.string("api_key_env")?) {
                http.api_key_env = env;
            }
            if let Some(ms) = cfg.u64("timeout_ms")? {
                http.timeout = std::time::Duration::from_millis(ms);
            }
            if let Some(r) = cfg.u64("max_retries")? {
                http.max_retries = r as u32;
            }
            if let Some(p) = cfg.usize("parallelism")? {
                http.parallelism_cap = p;
            }
            if let Some(t) = cfg.f64("temperature")? {
                http.temperature = t;
            }
            if let Some(m) = cfg.usize("max_tokens")? {
                http.max_tokens = m;
            }
            if let Some(ms) = cfg.u64("backoff_ms")? {
                http.backoff_base = std::time::Duration::from_millis(ms);
            }
            http.backoff_seed = mix(seed, &[hash_str("backoff")]);
            http.validate()
                .map_err(|e| CliError::Invalid(e.to_string()))?;
            Backend::Http(http)
        }
    };

    Ok(Globals {
        seed,
        jobs,
        config_path,
        backend,
    })
}

// ---------------------------------------------------------------------------
// IO helpers
// ---------------------------------------------------------------------------

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn read_with<T>(
    path: &Path,
    read: impl FnOnce(BufReader<fs::File>) -> Result<T, JsonlError>,
) -> Result<T, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::ReadIo {
        path: display(path),
        source: e,
    })?;
    read(BufReader::new(file)).map_err(|e| CliError::Data {
        path: display(path),
        source: e,
    })
}

fn read_records<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    read_with(path, |r| crate::domain::read_jsonl(r))
}

fn write_with(
    path: &Path,
    write: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>,
) -> Result<(), CliError> {
    let to_err = |e: io::Error| CliError::WriteIo {
        path: display(path),
        source: e,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(to_err)?;
        }
    }
    let file = fs::File::create(path).map_err(to_err)?;
    let mut w = BufWriter::new(file);
    write(&mut w).map_err(to_err)?;
    w.flush().map_err(to_err)
}

fn sorted_questions(path: &Path) -> Result<Vec<Question>, CliError> {
    let mut questions: Vec<Question> = read_records(path)?;
    questions.sort_by(|a, b| a.id().cmp(b.id()));
    for pair in questions.windows(2) {
        if pair[0].id() == pair[1].id() {
            return Err(CliError::DuplicateQuestion(pair[0].id().to_owned()));
        }
    }
    Ok(questions)
}

fn question_map(path: &Path) -> Result<BTreeMap<String, Question>, CliError> {
    let mut map = BTreeMap::new();
    for q in sorted_questions(path)? {
        map.insert(q.id().to_owned(), q);
    }
    Ok(map)
}

fn lookup<'a>(
    map: &'a BTreeMap<String, Question>,
    id: &str,
) -> Result<&'a Question, CliError> {
    map.get(id)
        .ok_or_else(|| CliError::UnknownQuestion(id.to_owned()))
}

/// Order-preserving parallel map with a bounded worker pool.
fn par_map<T, U, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<U>, CliError>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U, CliError> + Send + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

fn sort_entries(entries: &mut [LabeledEntry]) {
    entries.sort_by(|a, b| {
        a.labeled()
            .cot()
            .question_id()
            .cmp(b.labeled().cot().question_id())
    });
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

struct Outcome {
    records_in: u64,
    records_out: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

/// Runs the CLI and returns the process exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    2
                }
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut cause = std::error::Error::source(&e);
            while let Some(c) = cause {
                eprintln!("  caused by: {c}");
                cause = c.source();
            }
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let started = now_rfc3339();
    let (cfg, config_path) = FileConfig::load(cli.config.as_deref())?;
    let globals = resolve_globals(&cli, &cfg, config_path)?;
    let command_name = cli.command.name();

    let outcome = match &cli.command {
        Command::Generate {
            questions,
            out,
            n,
            max_steps,
        } => cmd_generate(&globals, &cfg, questions, out, *n, *max_steps)?,
        Command::Label {
            cots,
            questions,
            out,
            no_ground_truth,
        } => cmd_label(&globals, cots, questions, out, !*no_ground_truth)?,
        Command::Augment {
            kind,
            labeled,
            questions,
            out,
        } => cmd_augment(&globals, *kind, labeled, questions, out)?,
        Command::Filter {
            labeled,
            questions,
            out,
            threshold,
        } => cmd_filter(&globals, &cfg, labeled, questions, out, *threshold)?,
        Command::ExportTrain {
            labeled,
            questions,
            out,
        } => cmd_export_train(labeled, questions, out)?,
        Command::Score {
            cots,
            questions,
            out,
        } => cmd_score(&globals, cots, questions, out)?,
        Command::Rerank {
            pool,
            cots,
            questions,
            selector,
            agg,
            n,
            out,
            rows,
            resamples,
        } => cmd_rerank(
            &globals,
            &cfg,
            pool.as_deref(),
            cots.as_deref(),
            questions,
            *selector,
            *agg,
            *n,
            out,
            rows.as_deref(),
            *resamples,
        )?,
        Command::Search {
            questions,
            method,
            agg,
            out,
            n_beams,
            width,
            rollouts,
            branch,
            explore_weight,
            max_steps,
        } => cmd_search(
            &globals,
            &cfg,
            questions,
            *method,
            *agg,
            out,
            SearchKnobs {
                n_beams: *n_beams,
                width: *width,
                rollouts: *rollouts,
                branch: *branch,
                explore_weight: *explore_weight,
                max_steps: *max_steps,
            },
        )?,
        Command::Eval {
            pool,
            questions,
            ns,
            selectors,
            aggs,
            resamples,
            out,
        } => cmd_eval(&globals, &cfg, pool, questions, ns, selectors, aggs, *resamples, out)?,
        Command::Report {
            rows,
            format,
            plot,
            out_dir,
        } => cmd_report(&cfg, rows, *format, *plot, out_dir)?,
    };

    let finished = now_rfc3339();
    let dropped = outcome
        .records_in
        .checked_sub(outcome.records_out)
        .ok_or_else(|| {
            CliError::Internal(format!(
                "more records out ({}) than in ({})",
                outcome.records_out, outcome.records_in
            ))
        })?;
    let manifest = RunManifest {
        command: command_name.to_owned(),
        config_path: globals.config_path.clone(),
        seed: globals.seed,
        jobs: globals.jobs,
        inputs: outcome.inputs.iter().map(|p| display(p)).collect(),
        outputs: outcome.outputs.iter().map(|p| display(p)).collect(),
        records_in: outcome.records_in,
        records_out: outcome.records_out,
        records_dropped: dropped,
        started,
        finished,
    };
    manifest.validate()?;
    let primary = outcome
        .outputs
        .first()
        .ok_or_else(|| CliError::Internal("command produced no outputs".into()))?;
    let mpath = manifest_path(primary);
    let body = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Internal(e.to_string()))?;
    write_with(&mpath, |w| w.write_all((body + "\n").as_bytes()))?;

    println!(
        "{command_name}: {} in, {} out, {} dropped",
        manifest.records_in, manifest.records_out, manifest.records_dropped
    );
    for p in &outcome.outputs {
        println!("  wrote {}", p.display());
    }
    println!("  manifest {}", mpath.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_generate(
    g: &Globals,
    cfg: &FileConfig,
    questions_path: &Path,
    out: &Path,
    n_flag: Option<usize>,
    max_steps_flag: Option<usize>,
) -> Result<Outcome, CliError> {
    let questions = sorted_questions(questions_path)?;
    let n = n_flag
        .or(cfg.usize("n")?)
        .unwrap_or(DEFAULT_COTS_PER_QUESTION);
    if n == 0 {
        return Err(CliError::Invalid("--n must be at least 1".into()));
    }
    let max_steps = max_steps_flag.or(cfg.usize("max_steps")?);
    let generator = g.backend.generator()?;
    let model_id = g.backend.model_id().to_owned();

    let per_question: Vec<Vec<ChainOfThought>> = par_map(g.jobs, &questions, |q| {
        let mut sampled = Vec::with_capacity(n);
        for i in 0..n as u64 {
            let params =
                GenParams::default().with_seed(mix(g.seed, &[hash_str(q.id()), i]));
            let text = generator.complete(q, &params)?;
            let meta = GenMeta {
                model_id: model_id.clone(),
                temperature: params.temperature,
                seed: params.seed,
            };
            match ChainOfThought::from_text(q.id(), &text, meta) {
                Ok(cot) if max_steps.is_none_or(|m| cot.k() <= m) => sampled.push(cot),
                // Overlong chains and unsplittable replies are dropped.
                Ok(_) | Err(_) => {}
            }
        }
        Ok(sampled)
    })?;

    let cots: Vec<ChainOfThought> = per_question.into_iter().flatten().collect();
    write_with(out, |w| write_cot_pool(w, &cots))?;
    Ok(Outcome {
        records_in: (questions.len() * n) as u64,
        records_out: cots.len() as u64,
        inputs: vec![questions_path.to_path_buf()],
        outputs: vec![out.to_path_buf()],
    })
}

fn cmd_label(
    g: &Globals,
    cots_path: &Path,
    questions_path: &Path,
    out: &Path,
    include_ground_truth: bool,
) -> Result<Outcome, CliError> {
    let qmap = question_map(questions_path)?;
    let cots = read_with(cots_path, read_cot_pool)?;

    let maybe: Vec<Option<LabeledEntry>> = par_map(g.jobs, &cots, |cot| {
        let q = lookup(&qmap, cot.question_id())?;
        // Built under both backends so prompt assembly is exercised on every
        // run; the mock path answers from the world oracle instead.
        let prompt = build_autolabel_prompt(q, cot, include_ground_truth);
        let reply = match &g.backend {
            Backend::Mock(world) => render_autolabel_output(mock_first_bad(
                &world.for_question(q.id()),
                cot.steps(),
            )?),
            Backend::Http(http) => http_chat(http, &prompt, &GenParams::labeling())?,
        };
        let first_bad = match parse_autolabel_output(&reply, cot.k()) {
            Ok(v) => v,
            // A junk verdict drops the record, not the run.
            Err(_) => return Ok(None),
        };
        let labeled = apply_step_labels(cot, first_bad)?;
        Ok(Some(LabeledEntry::new(labeled, CotSource::Generated)))
    })?;

    let mut entries: Vec<LabeledEntry> = maybe.into_iter().flatten().collect();
    sort_entries(&mut entries);
    write_with(out, |w| write_labeled_dataset(w, &entries))?;
    Ok(Outcome {
        records_in: cots.len() as u64,
        records_out: entries.len() as u64,
        inputs: vec![cots_path.to_path_buf(), questions_path.to_path_buf()],
        outputs: vec![out.to_path_buf()],
    })
}

fn cmd_augment(
    g: &Globals,
    kind: AugmentKind,
    labeled_path: &Path,
    questions_path: &Path,
    out: &Path,
) -> Result<Outcome, CliError> {
    let qmap = question_map(questions_path)?;
    let entries = read_with(labeled_path, read_labeled_dataset)?;
    let indexed: Vec<(usize, &LabeledEntry)> = entries.iter().enumerate().collect();

    let maybe: Vec<Option<LabeledEntry>> = par_map(g.jobs, &indexed, |(i, entry)| {
        let labeled = entry.labeled();
        let q = lookup(&qmap, labeled.cot().question_id())?;
        match kind {
            AugmentKind::Counterfactual => {
                // Only fully correct chains can host an injected error.
                if labeled.labels().iter().any(|&l| l != 1) {
                    return Ok(None);
                }
                let s = mix(g.seed, &[hash_str("counterfactual"), *i as u64]);
                let types = sample_error_types(s);
                let prompt = build_counterfactual_prompt(q, labeled, Some(types), s)?;
                let reply = match &g.backend {
                    Backend::Mock(_) => {
                        let mut rng = derive_rng(s, &[hash_str("inject")]);
                        let step_num = rng.random_range(0..labeled.cot().k());
                        let bad = Step::new(format!(
                            "However, misreading the intermediate quantity as {} turns this into a {} error.",
                            step_num + 3,
                            types.0.name(),
                        ))?;
                        render_counterfactual_output(step_num, types.0, &bad)
                    }
                    Backend::Http(http) => {
                        http_chat(http, &prompt, &GenParams::default().with_seed(s))?
                    }
                };
                let (step_num, _ty, bad) =
                    match parse_counterfactual_output(&reply, labeled.cot().k()) {
                        Ok(v) => v,
                        Err(_) => return Ok(None),
                    };
                let new = apply_counterfactual(labeled.cot(), step_num, bad)?;
                Ok(Some(LabeledEntry::new(new, CotSource::Counterfactual)))
            }
            AugmentKind::Rewrite => {
                let s = mix(g.seed, &[hash_str("rewrite"), *i as u64]);
                let mut rng = derive_rng(s, &[hash_str("pick-step")]);
                let idx = rng.random_range(0..labeled.cot().k());
                let original = &labeled.cot().steps()[idx];
                let prompt = build_rewrite_prompt(original);
                let reply = match &g.backend {
                    Backend::Mock(_) => render_rewrite_output(&Step::new(format!(
                        "Put differently, {}",
                        original.text()
                    ))?),
                    Backend::Http(http) => {
                        http_chat(http, &prompt, &GenParams::default().with_seed(s))?
                    }
                };
                let new_step = match parse_rewrite_output(&reply) {
                    Ok(v) => v,
                    Err(_) => return Ok(None),
                };
                let new = apply_rewrite(labeled, idx, new_step)?;
                Ok(Some(LabeledEntry::new(new, CotSource::Rewrite)))
            }
        }
    })?;

    let mut augmented: Vec<LabeledEntry> = maybe.into_iter().flatten().collect();
    sort_entries(&mut augmented);
    write_with(out, |w| write_labeled_dataset(w, &augmented))?;
    Ok(Outcome {
        records_in: entries.len() as u64,
        records_out: augmented.len() as u64,
        inputs: vec![labeled_path.to_path_buf(), questions_path.to_path_buf()],
        outputs: vec![out.to_path_buf()],
    })
}

fn cmd_filter(
    g: &Globals,
    cfg: &FileConfig,
    labeled_path: &Path,
    questions_path: &Path,
    out: &Path,
    threshold_flag: Option<f64>,
) -> Result<Outcome, CliError> {
    let qmap = question_map(questions_path)?;
    let entries = read_with(labeled_path, read_labeled_dataset)?;
    let threshold = threshold_flag
        .or(cfg.f64("threshold")?)
        .unwrap_or(SelfFilterConfig::default().threshold);
    let filter_cfg = SelfFilterConfig { threshold };
    filter_cfg
        .validate()
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    let scorer = g.backend.scorer()?;

    let maybe: Vec<Option<LabeledEntry>> = par_map(g.jobs, &entries, |entry| {
        let labeled = entry.labeled();
        let q = lookup(&qmap, labeled.cot().question_id())?;
        let rewards = scorer.score(q, labeled.cot().steps())?;
        let kept = self_filter(vec![(labeled.clone(), rewards)], &filter_cfg)?;
        Ok(if kept.is_empty() {
            None
        } else {
            Some(entry.clone())
        })
    })?;

    let mut kept: Vec<LabeledEntry> = maybe.into_iter().flatten().collect();
    sort_entries(&mut kept);
    write_with(out, |w| write_labeled_dataset(w, &kept))?;
    Ok(Outcome {
        records_in: entries.len() as u64,
        records_out: kept.len() as u64,
        inputs: vec![labeled_path.to_path_buf(), questions_path.to_path_buf()],
        outputs: vec![out.to_path_buf()],
    })
}

fn cmd_export_train(
    labeled_path: &Path,
    questions_path: &Path,
    out: &Path,
) -> Result<Outcome, CliError> {
    let qmap = question_map(questions_path)?;
    let entries = read_with(labeled_path, read_labeled_dataset)?;
    let labeled: Vec<_> = entries.into_iter().map(LabeledEntry::into_labeled).collect();
    let records = export_training_records(&labeled, &qmap)?;
    write_with(out, |w| write_training_records(w, &records))?;
    Ok(Outcome {
        records_in: labeled.len() as u64,
        records_out: records.len() as u64,
        inputs: vec![labeled_path.to_path_buf(), questions_path.to_path_buf()],
        outputs: vec![out.to_path_buf()],
    })
}

fn score_pool(
    g: &Globals,
    qmap: &BTreeMap<String, Question>,
    cots: &[ChainOfThought],
) -> Result<Vec<ScoredCoT>, CliError> {
    let scorer = g.backend.scorer()?;
    par_map(g.jobs, cots, |cot| {
        let q = lookup(qmap, cot.question_id())?;
        let rewards = scorer.score(q, cot.steps())?;
        Ok(ScoredCoT::new(cot.clone(), rewards)?)
    })
}

fn cmd_score(
    g: &Globals,
    cots_path: &Path,
    questions_path: &Path,
    out: &Path,
) -> Result<Outcome, CliError> {
    let qmap = question_map(questions_path)?;
    let cots = read_with(cots_path, read_cot_pool)?;
    let mut scored = score_pool(g, &qmap, &cots)?;
    scored.sort_by(|a, b| a.cot().question_id().cmp(b.cot().question_id()));
    write_with(out, |w| write_scored_pool(w, &scored))?;
    Ok(Outcome {
        records_in: cots.len() as u64,
        records_out: scored.len() as u64,
        inputs: vec![cots_path.to_path_buf(), questions_path.to_path_buf()],
        outputs: vec![out.to_path_buf()],
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_rerank(
    g: &Globals,
    cfg: &FileConfig,
    pool_path: Option<&Path>,
    cots_path: Option<&Path>,
    questions_path: &Path,
    selector_flag: Option<Selector>,
    agg_flag: Option<AggregationMethod>,
    n_flag: Option<usize>,
    out: &Path,
    rows_path: Option<&Path>,
    resamples_flag: Option<usize>,
) -> Result<Outcome, CliError> {
    let qmap = question_map(questions_path)?;
    let (scored, pool_input): (Vec<ScoredCoT>, PathBuf) = match (pool_path, cots_path) {
        (Some(p), None) => (read_with(p, read_scored_pool)?, p.to_path_buf()),
        (None, Some(c)) => {
            let cots = read_with(c, read_cot_pool)?;
            (score_pool(g, &qmap, &cots)?, c.to_path_buf())
        }
        _ => return Err(CliError::Invalid("pass exactly one of --pool or --cots".into())),
    };
    let selector = match selector_flag {
        Some(s) => s,
        None => match cfg.string("selector")? {
            Some(s) => s.parse().map_err(|e: RerankError| CliError::Config(e.to_string()))?,
            None => Selector::Wmv,
        },
    };
    let agg = match agg_flag {
        Some(a) => a,
        None => match cfg.string("agg")? {
            Some(s) => s.parse().map_err(|e: AggregateError| CliError::Config(e.to_string()))?,
            None => AggregationMethod::Min,
        },
    };
    let n_cap = n_flag.or(cfg.usize("n")?);
    let resamples = resamples_flag.or(cfg.usize("resamples")?).unwrap_or(1000);

    let mut groups: BTreeMap<String, Vec<ScoredCoT>> = BTreeMap::new();
    for sc in scored {
        groups
            .entry(sc.cot().question_id().to_owned())
            .or_default()
            .push(sc);
    }
    let questions_in = groups.len() as u64;

    struct Pick {
        question_id: String,
        category: String,
        n_used: usize,
        truth: char,
        predicted: char,
        correct: bool,
        mv_correct: bool,
    }
    let mut picks: Vec<Pick> = Vec::new();
    for (qid, group) in &groups {
        let q = lookup(&qmap, qid)?;
        let mut items: Vec<(ChainOfThought, Option<RewardVector>)> = group
            .iter()
            .filter(|sc| sc.cot().final_answer().is_some())
            .map(|sc| (sc.cot().clone(), Some(sc.rewards().clone())))
            .collect();
        if let Some(n) = n_cap {
            items.truncate(n);
        }
        if items.is_empty() {
            continue; // question dropped: no usable candidates
        }
        let pool = CandidatePool::new(qid.clone(), items)?;
        let predicted = selector.select(&pool, agg)?;
        let mv_pick = Selector::Mv.select(&pool, agg)?;
        picks.push(Pick {
            question_id: qid.clone(),
            category: q.category().to_owned(),
            n_used: pool.len(),
            truth: q.truth().letter(),
            predicted: predicted.letter(),
            correct: predicted == q.truth(),
            mv_correct: mv_pick == q.truth(),
        });
    }

    write_with(out, |w| {
        writeln!(w, "question_id,category,selector,agg,n,truth,predicted,correct")?;
        for p in &picks {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                p.question_id, p.category, selector, agg, p.n_used, p.truth, p.predicted, p.correct
            )?;
        }
        Ok(())
    })?;
    let mut outputs = vec![out.to_path_buf()];

    if let Some(rows_out) = rows_path {
        let mut per_cat: BTreeMap<&str, Vec<&Pick>> = BTreeMap::new();
        for p in &picks {
            per_cat.entry(p.category.as_str()).or_default().push(p);
        }
        let mut rows = Vec::new();
        for (cat, cat_picks) in per_cat {
            let accs: Vec<f64> = cat_picks
                .iter()
                .map(|p| if p.correct { 100.0 } else { 0.0 })
                .collect();
            let acc = accs.iter().sum::<f64>() / accs.len() as f64;
            let mv_acc = 100.0
                * cat_picks.iter().filter(|p| p.mv_correct).count() as f64
                / cat_picks.len() as f64;
            let ci = bootstrap_ci(
                &accs,
                resamples,
                mix(g.seed, &[hash_str("rerank-ci"), hash_str(cat)]),
            )?;
            let n_row = n_cap.unwrap_or_else(|| {
                cat_picks.iter().map(|p| p.n_used).max().unwrap_or(0)
            });
            rows.push(MetricsRow::new(
                cat,
                selector.as_str(),
                agg.as_str(),
                n_row,
                acc,
                acc - mv_acc,
                Some(ci),
            )?);
        }
        let body =
            serde_json::to_string_pretty(&rows).map_err(|e| CliError::Internal(e.to_string()))?;
        write_with(rows_out, |w| w.write_all((body + "\n").as_bytes()))?;
        outputs.push(rows_out.to_path_buf());
    }

    Ok(Outcome {
        records_in: questions_in,
        records_out: picks.len() as u64,
        inputs: vec![pool_input, questions_path.to_path_buf()],
        outputs,
    })
}

struct SearchKnobs {
    n_beams: Option<usize>,
    width: Option<usize>,
    rollouts: Option<usize>,
    branch: Option<usize>,
    explore_weight: Option<f64>,
    max_steps: Option<usize>,
}

#[derive(Serialize)]
struct SearchRow {
    question_id: String,
    method: String,
    answer: Option<char>,
    correct: bool,
    score: Option<f64>,
    generation_units: Option<u64>,
    steps: Option<usize>,
}

fn cmd_search(
    g: &Globals,
    cfg: &FileConfig,
    questions_path: &Path,
    method: SearchMethodArg,
    agg_flag: Option<AggregationMethod>,
    out: &Path,
    knobs: SearchKnobs,
) -> Result<Outcome, CliError> {
    let questions = sorted_questions(questions_path)?;
    let agg = match agg_flag {
        Some(a) => a,
        None => match cfg.string("agg")? {
            Some(s) => s.parse().map_err(|e: AggregateError| CliError::Config(e.to_string()))?,
            None => AggregationMethod::Min,
        },
    };
    let beam_cfg = BeamConfig {
        n_beams: knobs.n_beams.or(cfg.usize("n_beams")?).unwrap_or(BeamConfig::default().n_beams),
        width: knobs.width.or(cfg.usize("width")?).unwrap_or(BeamConfig::default().width),
        max_steps: knobs
            .max_steps
            .or(cfg.usize("max_steps")?)
            .unwrap_or(BeamConfig::default().max_steps),
        method: agg,
    };
    let mcts_cfg = MctsConfig {
        rollouts: knobs
            .rollouts
            .or(cfg.usize("rollouts")?)
            .unwrap_or(MctsConfig::default().rollouts),
        branch: knobs.branch.or(cfg.usize("branch")?).unwrap_or(MctsConfig::default().branch),
        explore_weight: knobs
            .explore_weight
            .or(cfg.f64("explore_weight")?)
            .unwrap_or(MctsConfig::default().explore_weight),
        max_steps: knobs
            .max_steps
            .or(cfg.usize("max_steps")?)
            .unwrap_or(MctsConfig::default().max_steps),
        method: agg,
    };
    match method {
        SearchMethodArg::Beam => beam_cfg
            .validate()
            .map_err(|e| CliError::Invalid(e.to_string()))?,
        SearchMethodArg::Mcts => mcts_cfg
            .validate()
            .map_err(|e| CliError::Invalid(e.to_string()))?,
    }

    let generator = g.backend.generator()?;
    let scorer = g.backend.scorer()?;
    let method_name = match method {
        SearchMethodArg::Beam => "beam",
        SearchMethodArg::Mcts => "mcts",
    };

    let rows: Vec<SearchRow> = par_map(g.jobs, &questions, |q| {
        let result = match method {
            SearchMethodArg::Beam => {
                beam_search(generator.as_ref(), scorer.as_ref(), q, &beam_cfg)
            }
            SearchMethodArg::Mcts => mcts(generator.as_ref(), scorer.as_ref(), q, &mcts_cfg),
        };
        match result {
            Ok(r) => Ok(SearchRow {
                question_id: q.id().to_owned(),
                method: method_name.to_owned(),
                answer: r.cot.final_answer().map(|a| a.letter()),
                correct: r.cot.final_answer() == Some(q.truth()),
                score: Some(r.score),
                generation_units: Some(r.generation_units),
                steps: Some(r.cot.k()),
            }),
            // A search that finds no terminal is an outcome, not a crash.
            Err(SearchError::NoTerminalFound) => Ok(SearchRow {
                question_id: q.id().to_owned(),
                method: method_name.to_owned(),
                answer: None,
                correct: false,
                score: None,
                generation_units: None,
                steps: None,
            }),
            Err(e) => Err(e.into()),
        }
    })?;

    write_with(out, |w| write_jsonl(w, &rows))?;
    Ok(Outcome {
        records_in: questions.len() as u64,
        records_out: rows.len() as u64,
        inputs: vec![questions_path.to_path_buf()],
        outputs: vec![out.to_path_buf()],
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    g: &Globals,
    cfg: &FileConfig,
    pool_path: &Path,
    questions_path: &Path,
    ns: &[usize],
    selector_names: &[String],
    agg_names: &[String],
    resamples_flag: Option<usize>,
    out: &Path,
) -> Result<Outcome, CliError> {
    let qmap = question_map(questions_path)?;
    let scored = read_with(pool_path, read_scored_pool)?;
    let selectors: Vec<Selector> = if selector_names.is_empty() {
        Selector::ALL.to_vec()
    } else {
        selector_names
            .iter()
            .map(|s| s.parse().map_err(|e: RerankError| CliError::Invalid(e.to_string())))
            .collect::<Result<_, _>>()?
    };
    let aggs: Vec<AggregationMethod> = if agg_names.is_empty() {
        AggregationMethod::ALL.to_vec()
    } else {
        agg_names
            .iter()
            .map(|s| s.parse().map_err(|e: AggregateError| CliError::Invalid(e.to_string())))
            .collect::<Result<_, _>>()?
    };
    if ns.is_empty() || ns.contains(&0) {
        return Err(CliError::Invalid("--ns needs at least one nonzero pool size".into()));
    }
    let resamples = resamples_flag.or(cfg.usize("resamples")?).unwrap_or(100);
    let ci_resamples = cfg.usize("ci_resamples")?.unwrap_or(1000);

    let mut groups: BTreeMap<String, Vec<ScoredCoT>> = BTreeMap::new();
    for sc in scored {
        groups
            .entry(sc.cot().question_id().to_owned())
            .or_default()
            .push(sc);
    }
    let questions_in = groups.len() as u64;

    // Usable pool per question, answer-bearing candidates only.
    let mut pools: BTreeMap<String, CandidatePool> = BTreeMap::new();
    for (qid, group) in groups {
        lookup(&qmap, &qid)?;
        let items: Vec<(ChainOfThought, Option<RewardVector>)> = group
            .iter()
            .filter(|sc| sc.cot().final_answer().is_some())
            .map(|sc| (sc.cot().clone(), Some(sc.rewards().clone())))
            .collect();
        if items.is_empty() {
            continue;
        }
        pools.insert(qid.clone(), CandidatePool::new(qid, items)?);
    }

    let mut by_cat: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for qid in pools.keys() {
        let q = lookup(&qmap, qid)?;
        by_cat
            .entry(q.category().to_owned())
            .or_default()
            .push(qid.as_str());
    }

    // Subsets are paired: the subsample seed depends only on (question, N),
    // so every selector/agg pair is evaluated on identical draws.
    let acc_of = |qid: &str, n: usize, sel: Selector, agg: AggregationMethod| -> Result<f64, CliError> {
        let pool = &pools[qid];
        let truth = lookup(&qmap, qid)?.truth();
        let seed = mix(g.seed, &[hash_str("eval"), hash_str(qid), n as u64]);
        Ok(accuracy_at_n(pool, truth, n, resamples, seed, sel, agg)? * 100.0)
    };

    let mut mv_cache: BTreeMap<(String, usize), f64> = BTreeMap::new();
    for (cat, qids) in &by_cat {
        for &n in ns {
            let mut sum = 0.0;
            for qid in qids {
                sum += acc_of(qid, n, Selector::Mv, AggregationMethod::Min)?;
            }
            mv_cache.insert((cat.clone(), n), sum / qids.len() as f64);
        }
    }

    let mut rows = Vec::new();
    for (cat, qids) in &by_cat {
        for &selector in &selectors {
            for (agg_index, &agg) in aggs.iter().enumerate() {
                // MV ignores aggregation; one row per N is enough.
                if selector == Selector::Mv && agg_index > 0 {
                    continue;
                }
                for &n in ns {
                    let per_q: Vec<f64> = qids
                        .iter()
                        .map(|qid| acc_of(qid, n, selector, agg))
                        .collect::<Result<_, _>>()?;
                    let acc = per_q.iter().sum::<f64>() / per_q.len() as f64;
                    let mv_acc = mv_cache[&(cat.clone(), n)];
                    let ci = bootstrap_ci(
                        &per_q,
                        ci_resamples,
                        mix(
                            g.seed,
                            &[
                                hash_str("eval-ci"),
                                hash_str(cat),
                                hash_str(selector.as_str()),
                                hash_str(agg.as_str()),
                                n as u64,
                            ],
                        ),
                    )?;
                    rows.push(MetricsRow::new(
                        cat.clone(),
                        selector.as_str(),
                        agg.as_str(),
                        n,
                        acc,
                        acc - mv_acc,
                        Some(ci),
                    )?);
                }
            }
        }
    }

    let body = serde_json::to_string_pretty(&rows).map_err(|e| CliError::Internal(e.to_string()))?;
    write_with(out, |w| w.write_all((body + "\n").as_bytes()))?;
    Ok(Outcome {
        records_in: questions_in,
        records_out: pools.len() as u64,
        inputs: vec![pool_path.to_path_buf(), questions_path.to_path_buf()],
        outputs: vec![out.to_path_buf()],
    })
}

fn cmd_report(
    cfg: &FileConfig,
    rows_path: &Path,
    format_flag: Option<FormatArg>,
    plot_flag: bool,
    out_dir: &Path,
) -> Result<Outcome, CliError> {
    let text = fs::read_to_string(rows_path).map_err(|e| CliError::ReadIo {
        path: display(rows_path),
        source: e,
    })?;
    let raw: Vec<MetricsRow> = serde_json::from_str(&text).map_err(|e| CliError::Data {
        path: display(rows_path),
        source: JsonlError::Parse {
            line: e.line(),
            message: e.to_string(),
        },
    })?;
    // Revalidate through the constructor: loaded rows obey the same
    // invariants as computed ones.
    let rows: Vec<MetricsRow> = raw
        .iter()
        .map(|r| {
            MetricsRow::new(
                r.category(),
                r.selector(),
                r.agg(),
                r.n(),
                r.accuracy(),
                r.delta(),
                r.ci(),
            )
        })
        .collect::<Result<_, _>>()?;

    let format: ReportFormat = match format_flag {
        Some(f) => f.into(),
        None => match cfg.string("format")?.as_deref() {
            None | Some("csv") => ReportFormat::Csv,
            Some("json") => ReportFormat::Json,
            Some(other) => {
                return Err(CliError::Config(format!(
                    "key \"format\": expected \"csv\" or \"json\", got {other:?}"
                )))
            }
        },
    };
    let plot = plot_flag || cfg.bool("plot")?.unwrap_or(false);
    let written = emit_report(&rows, format, plot, out_dir)?;
    Ok(Outcome {
        records_in: rows.len() as u64,
        records_out: rows.len() as u64,
        inputs: vec![rows_path.to_path_buf()],
        outputs: written,
    })
}
