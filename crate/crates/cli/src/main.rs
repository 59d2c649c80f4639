use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::{parse_settings, BackendKind, RunConfig};
use micre::codec::HeaderOrder;
use micre::episode::HeaderPolicy;
use micre::inference::RteMode;
use micre::toy::{Arch, OptimizerKind};

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad input data or files (exit 2).
    Validation(String),
    /// Backend could not serve requests (exit 3).
    Backend(String),
    /// Inconsistent or unusable configuration (exit 4).
    Config(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Config(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Backend(m) => write!(f, "backend failure: {m}"),
            CliError::Config(m) => write!(f, "configuration error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "micre", version, about = "Meta in-context training and evaluation for relation extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate, balance and label-filter datasets; write a manifest.
    Ingest(IngestArgs),
    /// Meta-train the toy model; write a checkpoint and a loss CSV.
    MetaTrain(TrainCmd),
    /// Run an evaluation suite against a backend.
    Eval(EvalCmd),
    /// Sweep the number of demonstrations (k) or meta-training datasets.
    Sweep(SweepCmd),
    /// Original vs replaced relation labels for training and test.
    AblateLabels(TrainCmd),
    /// Write a synthetic templated corpus as JSONL.
    Synth(SynthArgs),
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// JSON run configuration; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel jobs (1 = sequential).
    #[arg(long)]
    jobs: Option<usize>,
    /// Parent directory of config-hash-named report directories.
    #[arg(long)]
    report_dir: Option<PathBuf>,
    /// Output directory (overrides the config-hash name where applicable).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Meta-training dataset files (JSONL). A sidecar `<stem>.labels`
    /// file, one label per line, declares the schema when present.
    #[arg(long = "dataset", required = true)]
    datasets: Vec<PathBuf>,
    /// Target dataset whose labels are filtered out of meta-training.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Training records kept per dataset.
    #[arg(long)]
    cap: Option<usize>,
    /// Stopword list (one per line) for label-overlap checks.
    #[arg(long)]
    stopwords: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeaderChoice {
    Pso,
    Sop,
    Random,
}

#[derive(Args, Clone, Default)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Demonstrations per meta-training instance.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long, value_enum)]
    header: Option<HeaderChoice>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, value_enum)]
    arch: Option<ArchChoice>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    optimizer: Option<OptChoice>,
    #[arg(long)]
    init_std: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchChoice {
    Attention,
    WindowedMlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptChoice {
    Adam,
    Sgd,
}

#[derive(Args, Clone, Default)]
struct EvalArgs {
    #[arg(long)]
    target: Option<PathBuf>,
    /// Zero-shot relation counts, e.g. 5,10,15.
    #[arg(long, value_delimiter = ',')]
    m: Option<Vec<usize>>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Few-shot settings, e.g. 5x1,5x5,10x1,10x5.
    #[arg(long)]
    settings: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    max_queries: Option<usize>,
    #[arg(long, value_enum)]
    order: Option<OrderChoice>,
    #[arg(long, value_enum)]
    rte_mode: Option<RteChoice>,
    /// Score candidates by mean per-token logprob.
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    no_span_filter: bool,
    #[arg(long)]
    max_tokens: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderChoice {
    Pso,
    Sop,
}

#[derive(Clone, Copy, ValueEnum)]
enum RteChoice {
    Generative,
    Scoring,
}

#[derive(Args, Clone, Default)]
struct BackendArgs {
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    fixture: Option<PathBuf>,
    /// Base URL of a remote inference server.
    #[arg(long)]
    url: Option<String>,
    #[arg(long)]
    retries: Option<u32>,
    #[arg(long)]
    timeout_secs: Option<f64>,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    eval: EvalArgs,
    /// Training seeds for multi-seed commands, e.g. 0,1,2.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Tasks evaluated per trained model, e.g. few-rc,zero-rc.
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<TaskChoice>>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskChoice {
    ZeroRc,
    ZeroRte,
    FewRc,
    FewRte,
}

impl From<TaskChoice> for micre::eval::Task {
    fn from(t: TaskChoice) -> Self {
        match t {
            TaskChoice::ZeroRc => Self::ZeroRc,
            TaskChoice::ZeroRte => Self::ZeroRte,
            TaskChoice::FewRc => Self::FewRc,
            TaskChoice::FewRte => Self::FewRte,
        }
    }
}

#[derive(Args)]
struct EvalCmd {
    #[arg(value_enum)]
    task: TaskChoice,
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    eval: EvalArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepAxis {
    K,
    Datasets,
}

#[derive(Args)]
struct SweepCmd {
    #[arg(value_enum)]
    axis: SweepAxis,
    /// Values along the axis (defaults 0,4,8,16,32 for k and 1,4,8 for datasets).
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<usize>>,
    #[command(flatten)]
    run: TrainCmd,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    meta_datasets: Option<usize>,
    #[arg(long)]
    heldout_datasets: Option<usize>,
    #[arg(long)]
    relations_per_meta: Option<usize>,
    #[arg(long)]
    relations_per_heldout: Option<usize>,
    #[arg(long)]
    records_per_relation: Option<usize>,
}

fn apply_common(cfg: &mut RunConfig, a: &CommonArgs) {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(j) = a.jobs {
        cfg.jobs = j.max(1);
    }
    if let Some(d) = &a.report_dir {
        cfg.report_dir = d.clone();
    }
    if let Some(o) = &a.out {
        cfg.out = Some(o.clone());
    }
}

fn apply_train(cfg: &mut RunConfig, a: &TrainArgs) {
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    if a.manifest.is_some() {
        cfg.manifest = a.manifest.clone();
    }
    set!(cfg.train.k, a.k);
    set!(cfg.train.steps, a.steps);
    set!(cfg.train.batch_size, a.batch_size);
    set!(cfg.train.block_size, a.block_size);
    set!(cfg.lm.embed_dim, a.embed_dim);
    set!(cfg.lm.hidden_dim, a.hidden_dim);
    set!(cfg.lm.window, a.window);
    set!(cfg.lm.lr, a.lr);
    set!(cfg.lm.init_std, a.init_std);
    if let Some(h) = a.header {
        cfg.train.header_policy = match h {
            HeaderChoice::Pso => HeaderPolicy::Fixed(HeaderOrder::Pso),
            HeaderChoice::Sop => HeaderPolicy::Fixed(HeaderOrder::Sop),
            HeaderChoice::Random => HeaderPolicy::PerEpisodeRandom,
        };
    }
    if let Some(arch) = a.arch {
        cfg.lm.arch = match arch {
            ArchChoice::Attention => Arch::Attention,
            ArchChoice::WindowedMlp => Arch::WindowedMlp,
        };
    }
    if let Some(o) = a.optimizer {
        cfg.lm.optimizer = match o {
            OptChoice::Adam => OptimizerKind::Adam,
            OptChoice::Sgd => OptimizerKind::Sgd,
        };
    }
}

fn apply_eval(cfg: &mut RunConfig, a: &EvalArgs) -> Result<(), CliError> {
    if a.target.is_some() {
        cfg.target = a.target.clone();
    }
    if let Some(m) = &a.m {
        cfg.zero.m_values = m.clone();
    }
    if let Some(r) = a.repeats {
        cfg.zero.repeats = r;
    }
    if let Some(s) = &a.settings {
        cfg.few.settings = parse_settings(s).map_err(CliError::Config)?;
    }
    if let Some(e) = a.episodes {
        cfg.few.episodes_per_run = e;
    }
    if a.queries.is_some() {
        cfg.few.queries = a.queries;
    }
    if let Some(r) = a.runs {
        cfg.few.runs = r;
    }
    if a.max_queries.is_some() {
        cfg.zero.max_queries = a.max_queries;
    }
    if let Some(o) = a.order {
        cfg.few.order = match o {
            OrderChoice::Pso => HeaderOrder::Pso,
            OrderChoice::Sop => HeaderOrder::Sop,
        };
    }
    if let Some(m) = a.rte_mode {
        cfg.few.rte_mode = match m {
            RteChoice::Generative => RteMode::Generative,
            RteChoice::Scoring => RteMode::Scoring,
        };
    }
    if a.normalize {
        cfg.inference.length_normalize = true;
    }
    if a.no_span_filter {
        cfg.inference.span_filter = false;
    }
    if let Some(t) = a.max_tokens {
        cfg.inference.max_tokens = t;
    }
    Ok(())
}

fn apply_backend(cfg: &mut RunConfig, a: &BackendArgs) {
    if let Some(k) = a.backend {
        cfg.backend.kind = k;
    }
    if a.checkpoint.is_some() {
        cfg.backend.checkpoint = a.checkpoint.clone();
    }
    if a.fixture.is_some() {
        cfg.backend.fixture = a.fixture.clone();
    }
    if a.url.is_some() {
        cfg.backend.url = a.url.clone();
    }
    if let Some(r) = a.retries {
        cfg.backend.retries = r;
    }
    if let Some(t) = a.timeout_secs {
        cfg.backend.timeout_secs = t;
    }
}

fn apply_run(cfg: &mut RunConfig, r: &TrainCmd) -> Result<(), CliError> {
    apply_common(cfg, &r.common);
    apply_train(cfg, &r.train);
    apply_eval(cfg, &r.eval)?;
    if let Some(s) = &r.seeds {
        cfg.sweep.seeds = s.clone();
    }
    if let Some(t) = &r.tasks {
        cfg.sweep.tasks = t.iter().map(|t| (*t).into()).collect();
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest(a) => {
            let mut cfg = RunConfig::load(a.common.config.as_deref())?;
            apply_common(&mut cfg, &a.common);
            if let Some(c) = a.cap {
                cfg.cap = c;
            }
            if a.target.is_some() {
                cfg.target = a.target.clone();
            }
            commands::ingest(&cfg, &a.datasets, a.stopwords.as_deref())
        }
        Command::MetaTrain(r) => {
            let mut cfg = RunConfig::load(r.common.config.as_deref())?;
            apply_run(&mut cfg, &r)?;
            commands::meta_train(&cfg)
        }
        Command::Eval(e) => {
            let mut cfg = RunConfig::load(e.common.config.as_deref())?;
            apply_common(&mut cfg, &e.common);
            apply_backend(&mut cfg, &e.backend);
            apply_eval(&mut cfg, &e.eval)?;
            commands::eval(&cfg, e.task.into())
        }
        Command::Sweep(s) => {
            let mut cfg = RunConfig::load(s.run.common.config.as_deref())?;
            apply_run(&mut cfg, &s.run)?;
            match s.axis {
                SweepAxis::K => {
                    if let Some(v) = &s.values {
                        cfg.sweep.k_values = v.clone();
                    }
                    commands::sweep_k(&cfg)
                }
                SweepAxis::Datasets => {
                    if let Some(v) = &s.values {
                        cfg.sweep.counts = v.clone();
                    }
                    commands::sweep_datasets(&cfg)
                }
            }
        }
        Command::AblateLabels(r) => {
            let mut cfg = RunConfig::load(r.common.config.as_deref())?;
            apply_run(&mut cfg, &r)?;
            commands::ablate_labels(&cfg)
        }
        Command::Synth(a) => {
            let mut cfg = RunConfig::load(a.common.config.as_deref())?;
            apply_common(&mut cfg, &a.common);
            let mut s = micre::synthetic::SyntheticConfig {
                seed: cfg.seed,
                ..Default::default()
            };
            if let Some(v) = a.meta_datasets {
                s.meta_datasets = v;
            }
            if let Some(v) = a.heldout_datasets {
                s.heldout_datasets = v;
            }
            if let Some(v) = a.relations_per_meta {
                s.relations_per_meta = v;
            }
            if let Some(v) = a.relations_per_heldout {
                s.relations_per_heldout = v;
            }
            if let Some(v) = a.records_per_relation {
                s.records_per_relation_meta = v;
                s.records_per_relation_heldout = v;
            }
            commands::synth(&cfg, &s)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
