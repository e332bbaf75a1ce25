//! Run configuration: a TOML document with one table per concern.
//!
//! Every field has a default, so an empty file is a valid configuration.
//!
//! ```toml
//! model = "contextual"
//!
//! [data]
//! dir = "data/dailydialog"
//! embeddings = "hash:16"
//!
//! [train]
//! epochs = 5
//! seed = 7
//!
//! [eval]
//! split = "test"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Split;
use crate::embedding::{EmbeddingSource, OovPolicy};
use crate::llm::{HttpClientConfig, UnparsablePolicy, DEFAULT_COLLAPSE_THRESHOLD, DEFAULT_PARALLELISM};
use crate::metrics::NeutralPolicy;
use crate::trainer::{TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Invalid(#[from] TrainError),
    #[error("invalid configuration: {0}")]
    Field(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Dialog encoder plus classifier over sentence embeddings.
    #[default]
    Contextual,
    /// Siamese network over word embeddings of single utterances.
    Isolated,
}

impl std::str::FromStr for ModelKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contextual" => Ok(ModelKind::Contextual),
            "isolated" => Ok(ModelKind::Isolated),
            other => Err(ConfigError::Field(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// DailyDialog directory, flat or with one sub-directory per split.
    pub dir: PathBuf,
    /// Sentence-embedding store file, or `hash:<dim>[:<seed>]`.
    pub embeddings: EmbeddingSource,
    /// Word-vector table for the isolated baseline.
    pub word_embeddings: Option<PathBuf>,
    pub oov: OovPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data/dailydialog"),
            embeddings: EmbeddingSource::Hashed { dim: 16, seed: 0 },
            word_embeddings: None,
            oov: OovPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub neutral_policy: NeutralPolicy,
    /// Adds neutral to the F1 scores; such reports are not comparable.
    pub include_neutral: bool,
    /// Independent trainings with seeds `seed, seed + 1, ...`.
    pub n_runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            neutral_policy: NeutralPolicy::default(),
            include_neutral: false,
            n_runs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    /// Built-in template name or template file path.
    pub template: String,
    /// Replay fixture; when set, no endpoint is contacted.
    pub replay: Option<PathBuf>,
    pub client: HttpClientConfig,
    pub parallelism: usize,
    pub unparsable: UnparsablePolicy,
    pub collapse_threshold: f64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            template: "llama-style".to_string(),
            replay: None,
            client: HttpClientConfig::default(),
            parallelism: DEFAULT_PARALLELISM,
            unparsable: UnparsablePolicy::default(),
            collapse_threshold: DEFAULT_COLLAPSE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub llm: LlmConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval.n_runs == 0 {
            return Err(ConfigError::Field("eval.n_runs must be at least 1".into()));
        }
        if self.llm.parallelism == 0 {
            return Err(ConfigError::Field("llm.parallelism must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.llm.collapse_threshold) {
            return Err(ConfigError::Field("llm.collapse_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// The fully resolved configuration, embedded in every artifact.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes to JSON")
    }
}
