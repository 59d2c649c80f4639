use std::path::{Path, PathBuf};

use micre::eval::{FewShotConfig, Task, ZeroShotConfig};
use micre::episode::MetaTrainConfig;
use micre::toy::ToyLMConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Toy,
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub checkpoint: Option<PathBuf>,
    pub fixture: Option<PathBuf>,
    pub url: Option<String>,
    pub timeout_secs: f64,
    pub retries: u32,
}

impl Default for BackendSpec {
    fn default() -> Self {
        Self {
            kind: BackendKind::Toy,
            checkpoint: None,
            fixture: None,
            url: None,
            timeout_secs: 60.0,
            retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSpec {
    pub length_normalize: bool,
    pub span_filter: bool,
    pub max_tokens: usize,
}

impl Default for InferenceSpec {
    fn default() -> Self {
        Self {
            length_normalize: false,
            span_filter: true,
            max_tokens: 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub k_values: Vec<usize>,
    pub counts: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Settings evaluated for every trained model.
    pub tasks: Vec<Task>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            k_values: vec![0, 4, 8, 16, 32],
            counts: vec![1, 4, 8],
            seeds: vec![0, 1, 2],
            tasks: vec![Task::ZeroRc, Task::ZeroRte, Task::FewRc, Task::FewRte],
        }
    }
}

/// Everything a command needs, after merging defaults, `--config` and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub report_dir: PathBuf,
    pub out: Option<PathBuf>,
    pub cap: usize,
    pub seed: u64,
    pub jobs: usize,
    pub train: MetaTrainConfig,
    pub lm: ToyLMConfig,
    pub backend: BackendSpec,
    pub inference: InferenceSpec,
    pub zero: ZeroShotConfig,
    pub few: FewShotConfig,
    pub sweep: SweepSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            target: None,
            report_dir: PathBuf::from("reports"),
            out: None,
            cap: micre::data::MetaCorpus::DEFAULT_CAP,
            seed: 0,
            jobs: 1,
            train: MetaTrainConfig::default(),
            lm: ToyLMConfig::default(),
            backend: BackendSpec::default(),
            inference: InferenceSpec::default(),
            zero: ZeroShotConfig::default(),
            few: FewShotConfig::default(),
            sweep: SweepSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Short digest of the resolved configuration, used to name report
    /// directories so reruns overwrite the same place.
    pub fn hash(&self, command: &str) -> String {
        let canonical = serde_json::to_string(&(command, self)).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self, command: &str) -> PathBuf {
        self.report_dir.join(format!("{command}-{}", self.hash(command)))
    }

    pub fn require_manifest(&self) -> Result<&Path, CliError> {
        self.manifest
            .as_deref()
            .ok_or_else(|| CliError::Config("--manifest is required".into()))
    }

    pub fn require_target(&self) -> Result<&Path, CliError> {
        self.target
            .as_deref()
            .ok_or_else(|| CliError::Config("--target is required".into()))
    }
}

/// Parses `5x1,10x5` into (N, K) pairs.
pub fn parse_settings(text: &str) -> Result<Vec<(usize, usize)>, String> {
    text.split(',')
        .map(|s| {
            let (n, k) = s
                .trim()
                .split_once(['x', 'X'])
                .ok_or_else(|| format!("setting {s:?} is not of the form NxK"))?;
            let n = n.parse().map_err(|_| format!("bad N in {s:?}"))?;
            let k = k.parse().map_err(|_| format!("bad K in {s:?}"))?;
            Ok((n, k))
        })
        .collect()
}
