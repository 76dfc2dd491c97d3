//! The JSON run configuration shared by every pipeline stage.
//!
//! Every section and field is optional except `seed`; unknown keys are
//! rejected so typos fail loudly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CorpusConfig, QueryConfig};
use crate::error::{CoreError, Result};
use crate::ids::IdConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub corpus: CorpusConfig,
    pub queries: QueryConfig,
    /// Train, validation and test fractions of each item's queries.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: CorpusConfig::default(),
            queries: QueryConfig::default(),
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub beams: Vec<usize>,
    pub split: String,
    pub constrained: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            beams: vec![5, 25, 50],
            split: "test".into(),
            constrained: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub candidates: Vec<usize>,
    pub concurrency: usize,
    pub engines: Vec<String>,
    pub duration_s: f64,
    pub warmup_s: f64,
    pub beam: usize,
    /// Synthetic prefix sizes for generative candidates.
    pub prefix_sizes: Vec<usize>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            candidates: vec![10_000, 100_000, 1_000_000],
            concurrency: 100,
            engines: vec!["generative".into(), "dual-tower".into()],
            duration_s: 5.0,
            warmup_s: 1.0,
            beam: 5,
            prefix_sizes: vec![128, 128, 128],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub identifier: IdConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub bench: BenchSettings,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            seed,
            data: DataConfig::default(),
            identifier: IdConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchSettings::default(),
        }
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CoreError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
