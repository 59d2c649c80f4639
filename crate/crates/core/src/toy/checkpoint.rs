//! JSON checkpoint container: format version, config, vocabulary and named
//! tensors with their shapes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{Body, Parameters, ToyLMConfig};
use super::tensor::Matrix;
use super::vocab::Vocab;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Container {
    format_version: u32,
    config: ToyLMConfig,
    block_size: usize,
    vocab: Vocab,
    tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub vocab: Vocab,
    pub block_size: usize,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let c = Container {
            format_version: FORMAT_VERSION,
            config: self.params.config.clone(),
            block_size: self.block_size,
            vocab: self.vocab.clone(),
            tensors: self
                .params
                .tensors()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name: name.to_string(),
                    rows: t.rows,
                    cols: t.cols,
                    data: t.data.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&c).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
        }
        let header: Header =
            serde_json::from_str(text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: header.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let c: Container =
            serde_json::from_str(text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if !c.vocab.is_well_formed() {
            return Err(CheckpointError::Malformed("vocabulary specials out of place".into()));
        }
        // Initialize a skeleton of the right arch, then fill by name.
        let mut params = Parameters::init(&c.config, c.vocab.len())
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        {
            let mut slots = params.tensors_mut();
            if slots.len() != c.tensors.len() {
                return Err(CheckpointError::Malformed(format!(
                    "{} tensors, expected {}",
                    c.tensors.len(),
                    slots.len()
                )));
            }
            for ((name, slot), t) in slots.iter_mut().zip(c.tensors) {
                if *name != t.name || slot.rows != t.rows || slot.cols != t.cols
                    || t.data.len() != t.rows * t.cols
                {
                    return Err(CheckpointError::Malformed(format!(
                        "tensor {} ({}x{}) does not fit {name} ({}x{})",
                        t.name, t.rows, t.cols, slot.rows, slot.cols
                    )));
                }
                **slot = Matrix {
                    rows: t.rows,
                    cols: t.cols,
                    data: t.data,
                };
            }
        }
        debug_assert!(matches!(
            (&params.body, c.config.arch),
            (Body::Attention { .. }, super::model::Arch::Attention)
                | (Body::WindowedMlp { .. }, super::model::Arch::WindowedMlp)
        ));
        Ok(Self {
            params,
            vocab: c.vocab,
            block_size: c.block_size,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
