//! JSON model checkpoints.
//!
//! A checkpoint stores the model kind, its architecture, the training
//! configuration and seed, and every parameter tensor by name. Loading
//! rebuilds the architecture from the metadata and requires the stored
//! tensors to match it exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::ClassifierParams;
use crate::corpus::{EmotionLabel, LabelSpace};
use crate::encoder::EncoderParams;
use crate::nn::{EncoderLayer, Linear, Lstm, NamedTensor, Parameters};
use crate::trainer::{ContextualModel, IsolatedModel, IsolatedNet, Subnetwork, TrainConfig};

pub const FORMAT: &str = "erc-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint (format `{0}`)")]
    BadFormat(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("expected a {expected} checkpoint, found {found}")]
    WrongKind { expected: &'static str, found: &'static str },
    #[error("invalid architecture: {0}")]
    BadMeta(String),
    #[error("checkpoint holds {found} parameters, architecture needs {expected}")]
    ParamCount { expected: usize, found: usize },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{0}` has non-finite or mis-sized data")]
    BadData(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// Architecture of the stored model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelMeta {
    Contextual {
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        encoder_layers: usize,
        label_space: LabelSpace,
        provider: String,
    },
    Classifier {
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        label_space: LabelSpace,
        provider: String,
    },
    Isolated {
        subnetwork: Subnetwork,
        input_dim: usize,
        output_dim: usize,
        centroids: BTreeMap<EmotionLabel, Vec<f64>>,
    },
}

impl ModelMeta {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelMeta::Contextual { .. } => "contextual",
            ModelMeta::Classifier { .. } => "classifier",
            ModelMeta::Isolated { .. } => "isolated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub model: ModelMeta,
    pub config: TrainConfig,
    pub config_echo: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

fn linear_count(i: usize, o: usize) -> Option<usize> {
    i.checked_mul(o)?.checked_add(o)
}

fn layer_count(d: usize, f: usize) -> Option<usize> {
    linear_count(d, d)?
        .checked_mul(4)?
        .checked_add(d.checked_mul(4)?)?
        .checked_add(linear_count(d, f)?)?
        .checked_add(linear_count(f, d)?)
}

fn lstm_count(i: usize, h: usize) -> Option<usize> {
    let g = h.checked_mul(4)?;
    i.checked_add(h)?.checked_add(1)?.checked_mul(g)
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if dim == 0 || heads == 0 || dim % heads != 0 {
        return Err(CheckpointError::BadMeta(format!("dim {dim} is not divisible into {heads} heads")));
    }
    Ok(())
}

impl ModelMeta {
    /// Parameter count implied by the metadata, or `None` on overflow.
    fn expected_params(&self) -> Option<usize> {
        match *self {
            ModelMeta::Contextual {
                dim,
                ffn_dim,
                encoder_layers,
                label_space,
                ..
            } => layer_count(dim, ffn_dim)?
                .checked_mul(encoder_layers)?
                .checked_add(dim)?
                .checked_add(layer_count(dim, ffn_dim)?)?
                .checked_add(linear_count(dim, label_space.len())?),
            ModelMeta::Classifier {
                dim,
                ffn_dim,
                label_space,
                ..
            } => layer_count(dim, ffn_dim)?.checked_add(linear_count(dim, label_space.len())?),
            ModelMeta::Isolated {
                subnetwork,
                input_dim,
                output_dim,
                ..
            } => match subnetwork {
                Subnetwork::Linear => linear_count(input_dim, output_dim),
                Subnetwork::Lstm => lstm_count(input_dim, output_dim),
            },
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ModelMeta::Contextual {
                dim,
                heads,
                ffn_dim,
                encoder_layers,
                ..
            } => {
                check_heads(*dim, *heads)?;
                if *encoder_layers == 0 || *ffn_dim == 0 {
                    return Err(CheckpointError::BadMeta("empty encoder".into()));
                }
            }
            ModelMeta::Classifier { dim, heads, ffn_dim, .. } => {
                check_heads(*dim, *heads)?;
                if *ffn_dim == 0 {
                    return Err(CheckpointError::BadMeta("empty feed-forward".into()));
                }
            }
            ModelMeta::Isolated {
                input_dim,
                output_dim,
                centroids,
                ..
            } => {
                if *input_dim == 0 || *output_dim == 0 {
                    return Err(CheckpointError::BadMeta("zero dimension".into()));
                }
                for (label, c) in centroids {
                    if c.len() != *output_dim || c.iter().any(|v| !v.is_finite()) {
                        return Err(CheckpointError::BadMeta(format!("bad centroid for {label}")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Copies `tensors` into `skeleton`, which must have exactly the same names
/// and shapes.
fn fill<P: Parameters>(skeleton: &mut P, tensors: &[NamedTensor]) -> Result<()> {
    let mut by_name: BTreeMap<&str, &NamedTensor> = BTreeMap::new();
    for t in tensors {
        if by_name.insert(&t.name, t).is_some() {
            return Err(CheckpointError::UnexpectedTensor(t.name.clone()));
        }
    }
    let mut seen = BTreeSet::new();
    let mut error = None;
    skeleton.visit_mut("", &mut |name, shape, data| {
        if error.is_some() {
            return;
        }
        let Some(t) = by_name.get(name) else {
            error = Some(CheckpointError::MissingTensor(name.to_string()));
            return;
        };
        if t.shape != shape {
            error = Some(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape.clone(),
            });
            return;
        }
        if t.data.len() != data.len() || t.data.iter().any(|v| !v.is_finite()) {
            error = Some(CheckpointError::BadData(name.to_string()));
            return;
        }
        data.copy_from_slice(&t.data);
        seen.insert(name.to_string());
    });
    if let Some(e) = error {
        return Err(e);
    }
    if let Some(extra) = by_name.keys().find(|n| !seen.contains(**n)) {
        return Err(CheckpointError::UnexpectedTensor(extra.to_string()));
    }
    Ok(())
}

fn skeleton_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

impl Checkpoint {
    fn new(model: ModelMeta, config: &TrainConfig, config_echo: serde_json::Value, tensors: Vec<NamedTensor>) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            seed: config.seed,
            model,
            config: config.clone(),
            config_echo,
            tensors,
        }
    }

    pub fn from_contextual(model: &ContextualModel, config_echo: serde_json::Value) -> Self {
        let meta = ModelMeta::Contextual {
            dim: model.dim(),
            heads: model.encoder.heads(),
            ffn_dim: model.encoder.ffn_dim(),
            encoder_layers: model.encoder.layers.len(),
            label_space: model.label_space(),
            provider: model.provider.clone(),
        };
        Self::new(meta, &model.config, config_echo, model.named_tensors(""))
    }

    pub fn from_classifier(
        params: &ClassifierParams,
        config: &TrainConfig,
        provider: &str,
        config_echo: serde_json::Value,
    ) -> Self {
        let meta = ModelMeta::Classifier {
            dim: params.dim(),
            heads: params.encoder.attention.heads,
            ffn_dim: params.encoder.feed_forward.inner.output_dim(),
            label_space: params.label_space,
            provider: provider.to_string(),
        };
        Self::new(meta, config, config_echo, params.named_tensors(""))
    }

    pub fn from_isolated(model: &IsolatedModel, config_echo: serde_json::Value) -> Self {
        let meta = ModelMeta::Isolated {
            subnetwork: model.net.kind(),
            input_dim: model.net.input_dim(),
            output_dim: model.net.output_dim(),
            centroids: model.centroids.iter().map(|(&l, c)| (l, c.to_vec())).collect(),
        };
        Self::new(meta, &model.config, config_echo, model.net.named_tensors(""))
    }

    /// Parses and checks the header, the metadata and the total parameter
    /// count. Tensor names and shapes are checked when converting to a model.
    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != FORMAT {
            return Err(CheckpointError::BadFormat(ckpt.format));
        }
        if ckpt.version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(ckpt.version));
        }
        ckpt.model.validate()?;
        let expected = ckpt
            .model
            .expected_params()
            .ok_or_else(|| CheckpointError::BadMeta("architecture too large".into()))?;
        let found = ckpt.tensors.iter().map(|t| t.data.len()).sum();
        if expected != found {
            return Err(CheckpointError::ParamCount { expected, found });
        }
        Ok(ckpt)
    }

    pub fn read(mut reader: impl Read) -> Result<Self> {
        let mut text = String::new();
        reader.read_to_string(&mut text)?;
        Self::from_json(&text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::fs::File::open(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn write(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{}", self.to_json())?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn kind(&self) -> &'static str {
        self.model.kind()
    }

    fn wrong_kind(&self, expected: &'static str) -> CheckpointError {
        CheckpointError::WrongKind {
            expected,
            found: self.kind(),
        }
    }

    pub fn to_contextual(&self) -> Result<ContextualModel> {
        let ModelMeta::Contextual {
            dim,
            heads,
            ffn_dim,
            encoder_layers,
            label_space,
            ref provider,
        } = self.model
        else {
            return Err(self.wrong_kind("contextual"));
        };
        let mut rng = skeleton_rng();
        let mut model = ContextualModel {
            encoder: EncoderParams {
                layers: (0..encoder_layers)
                    .map(|_| EncoderLayer::new(dim, heads, ffn_dim, &mut rng))
                    .collect(),
                sep_vector: Array1::zeros(dim),
            },
            classifier: classifier_skeleton(dim, heads, ffn_dim, label_space)?,
            config: self.config.clone(),
            provider: provider.clone(),
        };
        fill(&mut model, &self.tensors)?;
        Ok(model)
    }

    pub fn to_classifier(&self) -> Result<ClassifierParams> {
        let ModelMeta::Classifier {
            dim,
            heads,
            ffn_dim,
            label_space,
            ..
        } = self.model
        else {
            return Err(self.wrong_kind("classifier"));
        };
        let mut params = classifier_skeleton(dim, heads, ffn_dim, label_space)?;
        fill(&mut params, &self.tensors)?;
        Ok(params)
    }

    /// Provider of the sentence embeddings the model was trained on.
    pub fn provider(&self) -> Option<&str> {
        match &self.model {
            ModelMeta::Contextual { provider, .. } | ModelMeta::Classifier { provider, .. } => Some(provider),
            ModelMeta::Isolated { .. } => None,
        }
    }

    pub fn to_isolated(&self) -> Result<IsolatedModel> {
        let ModelMeta::Isolated {
            subnetwork,
            input_dim,
            output_dim,
            ref centroids,
        } = self.model
        else {
            return Err(self.wrong_kind("isolated"));
        };
        let mut net = match subnetwork {
            Subnetwork::Linear => IsolatedNet::Linear(Linear::zeros(input_dim, output_dim)),
            Subnetwork::Lstm => IsolatedNet::Lstm(Lstm::new(input_dim, output_dim, &mut skeleton_rng())),
        };
        fill(&mut net, &self.tensors)?;
        Ok(IsolatedModel {
            net,
            centroids: centroids.iter().map(|(&l, c)| (l, Array1::from(c.clone()))).collect(),
            config: self.config.clone(),
        })
    }
}

fn classifier_skeleton(dim: usize, heads: usize, ffn_dim: usize, space: LabelSpace) -> Result<ClassifierParams> {
    ClassifierParams::new(dim, heads, ffn_dim, space, &mut skeleton_rng())
        .map_err(|e| CheckpointError::BadMeta(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_encoder_layers;
    use proptest::prelude::*;

    fn contextual(layers: usize) -> ContextualModel {
        let config = TrainConfig {
            seed: 11,
            encoder_layers: layers,
            ..TrainConfig::default()
        };
        ContextualModel::new(
            init_encoder_layers(8, 2, 12, layers, 3).unwrap(),
            ClassifierParams::new(8, 2, 12, LabelSpace::All, &mut ChaCha8Rng::seed_from_u64(4)).unwrap(),
            config,
            "hash-8-0",
        )
        .unwrap()
    }

    #[test]
    fn contextual_round_trip_is_exact() {
        for layers in [1, 2] {
            let model = contextual(layers);
            let ckpt = Checkpoint::from_contextual(&model, serde_json::json!({"note": "x"}));
            let back = Checkpoint::from_json(&ckpt.to_json()).unwrap();
            assert_eq!(back, ckpt);
            assert_eq!(back.seed, 11);
            assert_eq!(back.to_contextual().unwrap(), model);
        }
    }

    #[test]
    fn classifier_and_isolated_round_trip() {
        let params = ClassifierParams::new(4, 2, 6, LabelSpace::EmotionsOnly, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let ckpt = Checkpoint::from_classifier(&params, &TrainConfig::default(), "p", serde_json::Value::Null);
        assert_eq!(Checkpoint::from_json(&ckpt.to_json()).unwrap().to_classifier().unwrap(), params);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for net in [IsolatedNet::Linear(Linear::new(3, 5, &mut rng)), IsolatedNet::Lstm(Lstm::new(3, 5, &mut rng))] {
            let model = IsolatedModel {
                net,
                centroids: [(EmotionLabel::Fear, Array1::from(vec![0.5; 5]))].into(),
                config: TrainConfig::default(),
            };
            let ckpt = Checkpoint::from_isolated(&model, serde_json::Value::Null);
            assert_eq!(Checkpoint::from_json(&ckpt.to_json()).unwrap().to_isolated().unwrap(), model);
        }
    }

    #[test]
    fn parameter_count_formula_matches_models() {
        let model = contextual(2);
        let ckpt = Checkpoint::from_contextual(&model, serde_json::Value::Null);
        assert_eq!(ckpt.model.expected_params(), Some(model.num_params()));
        let lstm = Lstm::new(3, 5, &mut skeleton_rng());
        assert_eq!(lstm_count(3, 5), Some(lstm.num_params()));
    }

    #[test]
    fn rejects_wrong_kind_and_header() {
        let ckpt = Checkpoint::from_contextual(&contextual(1), serde_json::Value::Null);
        assert!(matches!(ckpt.to_classifier(), Err(CheckpointError::WrongKind { .. })));
        let mut bad = ckpt.clone();
        bad.format = "other".into();
        assert!(matches!(Checkpoint::from_json(&bad.to_json()), Err(CheckpointError::BadFormat(_))));
        let mut bad = ckpt.clone();
        bad.version = 2;
        assert!(matches!(Checkpoint::from_json(&bad.to_json()), Err(CheckpointError::UnsupportedVersion(2))));
        assert!(Checkpoint::from_json("{}").is_err());
    }

    #[test]
    fn rejects_tensor_mismatches() {
        let ckpt = Checkpoint::from_contextual(&contextual(1), serde_json::Value::Null);

        let mut renamed = ckpt.clone();
        renamed.tensors[0].name = "encoder.bogus".into();
        let err = Checkpoint::from_json(&renamed.to_json()).unwrap().to_contextual().unwrap_err();
        assert!(matches!(err, CheckpointError::MissingTensor(_)), "{err}");

        let mut reshaped = ckpt.clone();
        let t = &mut reshaped.tensors[0];
        t.shape = vec![t.data.len(), 1];
        let err = Checkpoint::from_json(&reshaped.to_json()).unwrap().to_contextual().unwrap_err();
        assert!(matches!(err, CheckpointError::ShapeMismatch { .. }), "{err}");

        let mut short = ckpt.clone();
        short.tensors[0].data.pop();
        assert!(matches!(
            Checkpoint::from_json(&short.to_json()),
            Err(CheckpointError::ParamCount { .. })
        ));

        let mut meta = ckpt.clone();
        if let ModelMeta::Contextual { heads, .. } = &mut meta.model {
            *heads = 3;
        }
        assert!(matches!(Checkpoint::from_json(&meta.to_json()), Err(CheckpointError::BadMeta(_))));
    }

    #[test]
    fn huge_architectures_are_rejected_before_allocation() {
        let ckpt = Checkpoint::from_contextual(&contextual(1), serde_json::Value::Null);
        let mut big = ckpt.clone();
        if let ModelMeta::Contextual { dim, heads, .. } = &mut big.model {
            *dim = 1 << 40;
            *heads = 1;
        }
        assert!(Checkpoint::from_json(&big.to_json()).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_text_never_panics(s in "\\PC{0,200}") {
            if let Ok(c) = Checkpoint::from_json(&s) {
                let _ = c.to_contextual();
            }
        }
    }
}
