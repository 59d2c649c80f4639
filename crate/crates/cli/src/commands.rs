use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use micre::backend::{Backend, BackendError, MockBackend, RemoteBackend, RemoteConfig};
use micre::data::{
    filter_label_overlap, load_jsonl, write_jsonl, DataError, DatasetBundle, MetaCorpus, Stopwords,
};
use micre::episode::EpisodeError;
use micre::eval::{
    experiment_vocab, label_replacement_ablation, run_few_shot_suite, run_zero_shot_suite,
    sweep_dataset_count, EvalError, EvalPlan, Experiment, ReportSet, Task,
};
use micre::inference::{InferenceError, InferenceOptions};
use micre::synthetic::{generate, SyntheticConfig};
use micre::toy::{meta_train_with, Checkpoint, CheckpointError, ToyBackend, TrainError};
use serde::{Deserialize, Serialize};

use crate::config::{BackendKind, RunConfig};
use crate::CliError;

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<EpisodeError> for CliError {
    fn from(e: EpisodeError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Fixture(_) | BackendError::InvalidRequest(_) => {
                CliError::Validation(e.to_string())
            }
            BackendError::ContextOverflow { .. } => CliError::Config(e.to_string()),
            BackendError::BackendUnavailable(_) | BackendError::ProtocolError(_) => {
                CliError::Backend(e.to_string())
            }
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Backend(format!("checkpoint: {e}"))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Episode(e) => e.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Backend(b) => b.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Inference(e) => e.into(),
            EvalError::Backend(e) => e.into(),
            EvalError::Episode(e) => e.into(),
            EvalError::Train(e) => e.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Validation(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io(path, e))
}

/// `<stem>.labels` next to a dataset file, when it exists.
fn sidecar(path: &Path) -> Option<PathBuf> {
    let p = path.with_extension("labels");
    p.is_file().then_some(p)
}

fn load_diagnosed(path: &Path) -> Result<DatasetBundle, String> {
    load_jsonl(path, sidecar(path).as_deref()).map_err(|e| format!("{}: {e}", path.display()))
}

/// Loads a dataset, picking up its label sidecar; errors name the file.
pub fn load_dataset(path: &Path) -> Result<DatasetBundle, CliError> {
    load_diagnosed(path).map_err(CliError::Validation)
}

fn write_dataset(bundle: &DatasetBundle, path: &Path) -> Result<(), CliError> {
    write(path, "")?;
    write_jsonl(bundle, path)?;
    let labels: String = bundle.schema.iter().map(|l| format!("{}\n", l.raw())).collect();
    write(&path.with_extension("labels"), labels)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub source: PathBuf,
    /// Balanced and filtered copy, relative to the manifest.
    pub file: PathBuf,
    pub train_records: usize,
    pub labels: Vec<String>,
    pub discarded_labels: Vec<String>,
    pub dropped_records: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    /// Number of meta-training datasets.
    pub datasets: usize,
    pub cap: usize,
    pub seed: u64,
    pub target: Option<PathBuf>,
    pub target_labels: Vec<String>,
    pub bundles: Vec<ManifestEntry>,
    pub warnings: Vec<String>,
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

pub fn ingest(cfg: &RunConfig, paths: &[PathBuf], stopwords: Option<&Path>) -> Result<(), CliError> {
    let mut bundles = Vec::new();
    let mut failures = Vec::new();
    for p in paths {
        match load_diagnosed(p) {
            Ok(b) => bundles.push(b),
            Err(e) => failures.push(e),
        }
    }
    let target = cfg.target.as_deref().map(load_diagnosed).transpose();
    let target = match target {
        Ok(t) => t,
        Err(e) => {
            failures.push(e);
            None
        }
    };
    if !failures.is_empty() {
        return Err(CliError::Validation(failures.join("\n")));
    }
    let mut names = std::collections::BTreeSet::new();
    for b in &bundles {
        if !names.insert(b.name.clone()) {
            return Err(CliError::Validation(format!("duplicate dataset name {:?}", b.name)));
        }
    }
    if cfg.cap == 0 {
        return Err(CliError::Config("cap must be positive".into()));
    }
    let stop = match stopwords {
        Some(p) => Stopwords::load(p)?,
        None => Stopwords::default(),
    };
    let corpus = MetaCorpus::balanced(bundles, cfg.cap, cfg.seed);
    let (corpus, report) = match &target {
        Some(t) if !t.schema.is_empty() => {
            let labels = t.schema.iter().cloned().collect();
            filter_label_overlap(&corpus, &labels, &stop)
        }
        _ => (corpus, Default::default()),
    };
    let out = cfg.out.clone().unwrap_or_else(|| cfg.run_dir("ingest"));
    let mut entries = Vec::new();
    for (b, source) in corpus.bundles.iter().zip(paths) {
        let file = PathBuf::from(format!("{}.jsonl", b.name));
        write_dataset(b, &out.join(&file))?;
        entries.push(ManifestEntry {
            name: b.name.clone(),
            source: source.clone(),
            file,
            train_records: b.train().len(),
            labels: b.schema.iter().map(|l| l.raw().to_string()).collect(),
            discarded_labels: report.discarded.get(&b.name).cloned().unwrap_or_default(),
            dropped_records: report.dropped_records.get(&b.name).copied().unwrap_or(0),
        });
    }
    let manifest = Manifest {
        datasets: entries.len(),
        cap: cfg.cap,
        seed: cfg.seed,
        target: cfg.target.clone(),
        target_labels: target
            .map(|t| t.schema.iter().map(|l| l.raw().to_string()).collect())
            .unwrap_or_default(),
        bundles: entries,
        warnings: report.warnings,
    };
    let path = out.join("manifest.json");
    write(&path, serde_json::to_string_pretty(&manifest).expect("serializable"))?;
    print_json(&manifest);
    eprintln!("manifest written to {}", path.display());
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<(Manifest, MetaCorpus), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let bundles = manifest
        .bundles
        .iter()
        .map(|e| load_dataset(&base.join(&e.file)))
        .collect::<Result<Vec<_>, _>>()?;
    let corpus = MetaCorpus {
        bundles,
        cap: manifest.cap,
    };
    Ok((manifest, corpus))
}

/// Corpus from `--manifest` and the target named by `--target` or the manifest.
fn corpus_and_target(cfg: &RunConfig) -> Result<(MetaCorpus, Option<DatasetBundle>), CliError> {
    let (manifest, corpus) = load_manifest(cfg.require_manifest()?)?;
    let target = cfg.target.clone().or(manifest.target);
    let target = target.as_deref().map(load_dataset).transpose()?;
    Ok((corpus, target))
}

pub fn meta_train(cfg: &RunConfig) -> Result<(), CliError> {
    let (corpus, target) = corpus_and_target(cfg)?;
    let vocab = match &target {
        Some(t) => experiment_vocab(&corpus, t),
        None => micre::toy::vocab_for(&corpus.bundles),
    };
    let train = micre::episode::MetaTrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let lm = micre::toy::ToyLMConfig {
        seed: cfg.seed,
        ..cfg.lm.clone()
    };
    eprintln!(
        "meta-training: k={} steps={} batch={} block={} datasets={}",
        train.k,
        train.steps,
        train.batch_size,
        train.block_size,
        corpus.bundles.len()
    );
    let outcome = meta_train_with(&corpus, &vocab, &train, &lm, |step, loss| {
        if (step + 1) % 500 == 0 {
            eprintln!("step {} loss {loss:.4}", step + 1);
        }
    })?;
    let out = cfg.out.clone().unwrap_or_else(|| cfg.run_dir("meta-train"));
    let mut csv = String::from("step,loss\n");
    for (i, l) in outcome.loss_curve.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    write(&out.join("loss.csv"), csv)?;
    let ckpt = Checkpoint {
        params: outcome.params.clone(),
        vocab,
        block_size: train.block_size,
    };
    let ckpt_path = out.join("checkpoint.json");
    write(&ckpt_path, ckpt.to_json())?;
    match outcome.tail_mean(100) {
        Some(l) => println!("final mean loss {l:.6}"),
        None => println!("final mean loss n/a (0 steps)"),
    }
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

fn open_backend(cfg: &RunConfig) -> Result<Box<dyn Backend>, CliError> {
    let b = &cfg.backend;
    match b.kind {
        BackendKind::Toy => {
            let path = b
                .checkpoint
                .as_deref()
                .ok_or_else(|| CliError::Config("toy backend needs --checkpoint".into()))?;
            let c = Checkpoint::load(path)?;
            let backend = ToyBackend::new(c.params, c.vocab, c.block_size)
                .map_err(|e| CliError::Backend(format!("checkpoint: {e}")))?;
            Ok(Box::new(backend))
        }
        BackendKind::Mock => {
            let path = b
                .fixture
                .as_deref()
                .ok_or_else(|| CliError::Config("mock backend needs --fixture".into()))?;
            Ok(Box::new(MockBackend::from_fixture(path)?))
        }
        BackendKind::Remote => {
            let url = b
                .url
                .clone()
                .ok_or_else(|| CliError::Config("remote backend needs --url".into()))?;
            let mut rc = RemoteConfig::new(url).with_env_token();
            rc.retries = b.retries;
            rc.timeout = std::time::Duration::from_secs_f64(b.timeout_secs);
            Ok(Box::new(RemoteBackend::new(rc)))
        }
    }
}

fn inference_options(cfg: &RunConfig) -> InferenceOptions {
    InferenceOptions {
        length_normalize: cfg.inference.length_normalize,
        jobs: cfg.jobs,
        max_tokens: cfg.inference.max_tokens,
        span_filter: cfg.inference.span_filter,
    }
}

fn write_reports(set: &ReportSet, dir: &Path) -> Result<(), CliError> {
    write(&dir.join("report.json"), set.to_json())?;
    let md = set.to_markdown();
    write(&dir.join("report.md"), &md)?;
    print!("{md}");
    eprintln!("reports written to {}", dir.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, task: Task) -> Result<(), CliError> {
    let target = load_dataset(cfg.require_target()?)?;
    let backend = open_backend(cfg)?;
    let opts = inference_options(cfg);
    let reports = match task {
        Task::ZeroRc | Task::ZeroRte => run_zero_shot_suite(&*backend, &target, &cfg.zero, &[task], &opts)?,
        Task::FewRc | Task::FewRte => run_few_shot_suite(&*backend, &target, &cfg.few, task, &opts)?,
    };
    let set = ReportSet::new(format!("{} on {}", task.name(), target.name), reports);
    let dir = cfg.out.clone().unwrap_or_else(|| cfg.run_dir(&format!("eval-{}", task.name())));
    write_reports(&set, &dir)
}

fn experiment(cfg: &RunConfig) -> Experiment {
    Experiment {
        train: cfg.train.clone(),
        lm: cfg.lm.clone(),
        plan: EvalPlan {
            tasks: cfg.sweep.tasks.clone(),
            zero: cfg.zero.clone(),
            few: cfg.few.clone(),
        },
        jobs: cfg.jobs,
    }
}

fn sweep_inputs(cfg: &RunConfig) -> Result<(MetaCorpus, DatasetBundle), CliError> {
    let (corpus, target) = corpus_and_target(cfg)?;
    let target = target.ok_or_else(|| CliError::Config("--target is required".into()))?;
    if target.is_empty() {
        return Err(CliError::Validation(format!("target {} has no records", target.name)));
    }
    Ok((corpus, target))
}

fn write_grid(set: &ReportSet, dir: &Path) -> Result<(), CliError> {
    let mut csv = String::from("setting,seed,metric,value\n");
    for r in &set.reports {
        for s in &r.per_seed {
            for (m, v) in &s.metrics {
                csv.push_str(&format!("{},{},{m},{v}\n", r.setting.label, s.seed));
            }
        }
    }
    write(&dir.join("grid.csv"), csv)?;
    write_reports(set, dir)
}

pub fn sweep_k(cfg: &RunConfig) -> Result<(), CliError> {
    let (corpus, target) = sweep_inputs(cfg)?;
    let set = micre::eval::sweep_k(&corpus, &target, &cfg.sweep.k_values, &cfg.sweep.seeds, &experiment(cfg))?;
    write_grid(&set, &cfg.out.clone().unwrap_or_else(|| cfg.run_dir("sweep-k")))
}

pub fn sweep_datasets(cfg: &RunConfig) -> Result<(), CliError> {
    let (corpus, target) = sweep_inputs(cfg)?;
    let set = sweep_dataset_count(&corpus, &target, &cfg.sweep.counts, &cfg.sweep.seeds, &experiment(cfg))?;
    write_grid(&set, &cfg.out.clone().unwrap_or_else(|| cfg.run_dir("sweep-datasets")))
}

pub fn ablate_labels(cfg: &RunConfig) -> Result<(), CliError> {
    let (corpus, target) = sweep_inputs(cfg)?;
    let set = label_replacement_ablation(&corpus, &target, &cfg.sweep.seeds, &experiment(cfg))?;
    write_grid(&set, &cfg.out.clone().unwrap_or_else(|| cfg.run_dir("ablate-labels")))
}

pub fn synth(cfg: &RunConfig, s: &SyntheticConfig) -> Result<(), CliError> {
    let labels = s.meta_datasets * s.relations_per_meta + s.heldout_datasets * s.relations_per_heldout;
    if s.entity_vocabulary < labels + 3 {
        return Err(CliError::Config(format!(
            "{labels} labels need an entity vocabulary of at least {}",
            labels + 3
        )));
    }
    let suite = generate(s);
    let out = cfg.out.clone().unwrap_or_else(|| cfg.run_dir("synth"));
    let mut files: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for (kind, bundles) in [("meta", &suite.meta), ("heldout", &suite.heldout)] {
        for b in bundles {
            let path = out.join(format!("{}.jsonl", b.name));
            write_dataset(b, &path)?;
            files.entry(kind).or_default().push(path.display().to_string());
        }
    }
    print_json(&files);
    Ok(())
}
