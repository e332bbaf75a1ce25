//! Training loops for the isolated-utterance baseline and the contextual
//! model.
//!
//! Contextual training works on batches of whole dialogs. Each step runs the
//! encoder over every dialog of the batch, then applies the cross-entropy
//! objective (classifier and encoder) and the triplet objective (encoder
//! only) on the contextual utterance representations, either as two
//! successive updates or as one update on their weighted sum.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use ndarray::{s, Array1, Array2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{
    batch_class_weights, batch_cross_entropy, classifier_backward, classify_rows,
    classify_rows_cached, present_label_weights, pretrain_classifier, ClassWeights,
    ClassifierError, ClassifierParams,
};
use crate::corpus::{Corpus, CorpusError, Dialog, EmotionLabel, LabelSpace, Utterance};
use crate::embedding::{embed_words, mean_pool, EmbeddingError, SentenceEmbeddingStore, WordEmbeddingTable};
use crate::encoder::{
    build_dialog_sequence, encoder_backward, encoder_forward_cached, init_encoder_layers,
    split_contextual, unsplit_gradient, EncoderCache, EncoderError, EncoderParams,
};
use crate::metrics::{confusion, ClassLabel, MetricsError, MetricsReport, NeutralPolicy, ReportOptions};
use crate::nn::{clip_global_norm, join, zeros_like, Adam, Linear, Lstm, Parameters};
use crate::triplet::{
    batch_all_triplets, batch_hard_triplets, batch_triplet_loss, sample_triplets, Distance,
    SamplingStrategy, Triplet, TripletError, TripletLossConfig, UtteranceRef,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Triplet(#[from] TripletError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no trainable utterances in the train split")]
    EmptyTrainSplit,
    #[error("embedding dimension {store} does not match the model dimension {model}")]
    DimMismatch { store: usize, model: usize },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// A cross-entropy update followed by a triplet update.
    #[default]
    Alternating,
    /// One update on `CE + lambda * triplet`.
    Summed,
    /// Cross-entropy only; the ablation without metric learning.
    CrossEntropyOnly,
}

impl FromStr for LossMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alternating" => Ok(LossMode::Alternating),
            "summed" => Ok(LossMode::Summed),
            "cross-entropy-only" | "ce-only" => Ok(LossMode::CrossEntropyOnly),
            other => Err(TrainError::InvalidConfig(format!("unknown loss mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subnetwork {
    #[default]
    Linear,
    Lstm,
}

impl FromStr for Subnetwork {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Subnetwork::Linear),
            "lstm" => Ok(Subnetwork::Lstm),
            other => Err(TrainError::InvalidConfig(format!("unknown subnetwork `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub pretrain_epochs: usize,
    /// Overrides `pretrain_epochs` with an exact step count.
    pub pretrain_steps: Option<usize>,
    /// Stops contextual or isolated training after this many steps.
    pub max_steps: Option<usize>,
    /// Utterances per batch for pretraining, triplets per batch for the
    /// isolated baseline.
    pub batch_size: usize,
    pub dialogs_per_batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub margin: f64,
    pub distance: Distance,
    pub sampling_strategy: SamplingStrategy,
    /// Triplets drawn per batch by the weighted-random strategy.
    pub triplets_per_batch: usize,
    pub loss_mode: LossMode,
    pub lambda: f64,
    pub label_space: LabelSpace,
    pub subnetwork: Subnetwork,
    pub isolated_dim: usize,
    pub heads: usize,
    /// Defaults to four times the embedding dimension.
    pub ffn_dim: Option<usize>,
    pub encoder_layers: usize,
    pub grad_clip: f64,
    pub balanced_sampler: bool,
    pub weighted_ce: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            pretrain_epochs: 3,
            pretrain_steps: None,
            max_steps: None,
            batch_size: 32,
            dialogs_per_batch: 8,
            learning_rate: 1e-3,
            seed: 0,
            margin: 1.0,
            distance: Distance::Euclidean,
            sampling_strategy: SamplingStrategy::BatchAll,
            triplets_per_batch: 64,
            loss_mode: LossMode::Alternating,
            lambda: 1.0,
            label_space: LabelSpace::All,
            subnetwork: Subnetwork::Linear,
            isolated_dim: 64,
            heads: 4,
            ffn_dim: None,
            encoder_layers: 1,
            grad_clip: 1.0,
            balanced_sampler: true,
            weighted_ce: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(TrainError::InvalidConfig(msg.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 || self.dialogs_per_batch == 0 || self.triplets_per_batch == 0 {
            return bad("batch sizes must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if self.loss_mode == LossMode::Summed && !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be positive in summed mode");
        }
        if self.heads == 0 || self.isolated_dim == 0 || self.encoder_layers == 0 {
            return bad("heads, isolated_dim and encoder_layers must be at least 1");
        }
        TripletLossConfig::new(self.margin, self.distance)?;
        Ok(())
    }

    pub fn ffn_dim_for(&self, dim: usize) -> usize {
        self.ffn_dim.unwrap_or(4 * dim)
    }

    pub fn triplet_config(&self) -> Result<TripletLossConfig> {
        Ok(TripletLossConfig::new(self.margin, self.distance)?)
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is serializable")
    }
}

/// Deterministic per-purpose seed derived from the run seed.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextualModel {
    pub encoder: EncoderParams,
    pub classifier: ClassifierParams,
    pub config: TrainConfig,
    pub provider: String,
}

impl ContextualModel {
    pub fn new(
        encoder: EncoderParams,
        classifier: ClassifierParams,
        config: TrainConfig,
        provider: &str,
    ) -> Result<Self> {
        if encoder.dim() != classifier.dim() {
            return Err(TrainError::DimMismatch {
                store: encoder.dim(),
                model: classifier.dim(),
            });
        }
        Ok(Self {
            encoder,
            classifier,
            config,
            provider: provider.to_string(),
        })
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn label_space(&self) -> LabelSpace {
        self.classifier.label_space
    }
}

impl Parameters for ContextualModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

/// One line of the training progress log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub ce: Option<f64>,
    pub triplet: Option<f64>,
    pub active_triplets: usize,
    pub triplets: usize,
    pub triplet_skipped: bool,
}

impl StepRecord {
    pub fn total_loss(&self, lambda: f64) -> f64 {
        self.ce.unwrap_or(0.0) + lambda * self.triplet.unwrap_or(0.0)
    }
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        write!(
            f,
            "step={} epoch={} ce={} triplet={} active={} triplets={}",
            self.step,
            self.epoch,
            opt(self.ce),
            if self.triplet_skipped { "skipped".to_string() } else { opt(self.triplet) },
            self.active_triplets,
            self.triplets
        )
    }
}

/// Encoder outputs of one batch of dialogs.
struct BatchForward {
    reps: Array2<f64>,
    spans: Vec<(usize, usize)>,
    caches: Vec<EncoderCache>,
    labels: Vec<EmotionLabel>,
    /// Rows whose gold label is in the model's label space.
    scored: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletStepStats {
    pub loss: f64,
    pub active: usize,
    pub total: usize,
}

/// Stateful contextual trainer: model, optimizers and sampler randomness.
pub struct ContextualTrainer<'a> {
    pub model: ContextualModel,
    store: &'a SentenceEmbeddingStore,
    encoder_adam: Adam,
    classifier_adam: Adam,
    triplet_weights: BTreeMap<EmotionLabel, f64>,
    triplet_cfg: TripletLossConfig,
    rng: ChaCha8Rng,
    steps: usize,
}

impl<'a> ContextualTrainer<'a> {
    pub fn new(model: ContextualModel, store: &'a SentenceEmbeddingStore, train: &Corpus) -> Result<Self> {
        if store.dim() != model.dim() {
            return Err(TrainError::DimMismatch {
                store: store.dim(),
                model: model.dim(),
            });
        }
        let space = model.label_space();
        let counts: BTreeMap<EmotionLabel, usize> = train
            .label_histogram
            .iter()
            .filter(|(l, _)| space.contains(**l))
            .map(|(&l, &c)| (l, c))
            .collect();
        let triplet_weights = if model.config.balanced_sampler {
            present_label_weights(&counts)
        } else {
            counts.keys().map(|&l| (l, 1.0)).collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
        rng.set_stream(3);
        Ok(Self {
            encoder_adam: Adam::new(model.config.learning_rate),
            classifier_adam: Adam::new(model.config.learning_rate),
            triplet_cfg: model.config.triplet_config()?,
            model,
            store,
            triplet_weights,
            rng,
            steps: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    fn forward(&self, dialogs: &[&Dialog]) -> Result<BatchForward> {
        let mut blocks = Vec::with_capacity(dialogs.len());
        let mut spans = Vec::with_capacity(dialogs.len());
        let mut caches = Vec::with_capacity(dialogs.len());
        let mut labels = Vec::new();
        let mut offset = 0;
        for dialog in dialogs {
            let seq = build_dialog_sequence(dialog, self.store, &self.model.encoder)?;
            let (out, cache) = encoder_forward_cached(&seq, &self.model.encoder)?;
            let reps = split_contextual(&out, &seq.sep_positions)?;
            spans.push((offset, reps.nrows()));
            offset += reps.nrows();
            labels.extend(dialog.labels());
            blocks.push(reps);
            caches.push(cache);
        }
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        let reps = ndarray::concatenate(Axis(0), &views).map_err(|_| TrainError::DimMismatch {
            store: self.store.dim(),
            model: self.model.dim(),
        })?;
        let space = self.model.label_space();
        let scored = (0..labels.len()).filter(|&i| space.contains(labels[i])).collect();
        Ok(BatchForward {
            reps,
            spans,
            caches,
            labels,
            scored,
        })
    }

    fn encoder_grad(&self, fwd: &BatchForward, d_reps: &Array2<f64>) -> EncoderParams {
        let mut grad = zeros_like(&self.model.encoder);
        for (&(offset, len), cache) in fwd.spans.iter().zip(&fwd.caches) {
            let d_full = unsplit_gradient(&d_reps.slice(s![offset..offset + len, ..]).to_owned());
            encoder_backward(&self.model.encoder, cache, &d_full, &mut grad);
        }
        grad
    }

    /// Cross-entropy loss and the gradient w.r.t. the classifier and the
    /// representation rows. `None` when no row is scored.
    fn ce_grads(&self, fwd: &BatchForward) -> Result<Option<(f64, ClassifierParams, Array2<f64>)>> {
        if fwd.scored.is_empty() {
            return Ok(None);
        }
        let x = fwd.reps.select(Axis(0), &fwd.scored);
        let targets: Vec<EmotionLabel> = fwd.scored.iter().map(|&i| fwd.labels[i]).collect();
        let weights = if self.model.config.weighted_ce {
            batch_class_weights(&targets)?
        } else {
            ClassWeights::uniform()
        };
        let classifier = &self.model.classifier;
        let (logits, cache) = classify_rows_cached(&x, classifier)?;
        let (loss, d_logits) = batch_cross_entropy(&logits, &targets, classifier.label_space, &weights)?;
        let mut grad = zeros_like(classifier);
        let d_x = classifier_backward(classifier, &cache, &d_logits, &mut grad);
        let mut d_reps = Array2::zeros(fwd.reps.raw_dim());
        for (k, &row) in fwd.scored.iter().enumerate() {
            d_reps.row_mut(row).assign(&d_x.row(k));
        }
        Ok(Some((loss, grad, d_reps)))
    }

    fn mine(&mut self, fwd: &BatchForward) -> Result<Vec<Triplet<usize>>> {
        let pool: Vec<(usize, EmotionLabel)> = fwd.scored.iter().map(|&i| (i, fwd.labels[i])).collect();
        match self.model.config.sampling_strategy {
            SamplingStrategy::BatchAll => {
                let ts = batch_all_triplets(&pool);
                if ts.is_empty() {
                    Err(TripletError::InsufficientDiversity.into())
                } else {
                    Ok(ts)
                }
            }
            SamplingStrategy::BatchHard => {
                let with_reps: Vec<_> = pool.iter().map(|&(i, l)| (i, l, fwd.reps.row(i))).collect();
                let ts = batch_hard_triplets(&with_reps, &self.triplet_cfg)?;
                if ts.is_empty() {
                    Err(TripletError::InsufficientDiversity.into())
                } else {
                    Ok(ts)
                }
            }
            SamplingStrategy::WeightedRandom => Ok(sample_triplets(
                &pool,
                self.model.config.triplets_per_batch,
                &self.triplet_weights,
                &mut self.rng,
            )?),
        }
    }

    /// Triplet loss statistics and the gradient w.r.t. the representation
    /// rows. `None` when the batch cannot form a triplet.
    fn triplet_grads(&mut self, fwd: &BatchForward) -> Result<Option<(TripletStepStats, Array2<f64>)>> {
        let triplets = match self.mine(fwd) {
            Ok(ts) => ts,
            Err(TrainError::Triplet(TripletError::InsufficientDiversity)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let b = batch_triplet_loss(&fwd.reps, &triplets, &self.triplet_cfg)?;
        let stats = TripletStepStats {
            loss: b.loss,
            active: b.n_active,
            total: b.n_total,
        };
        Ok(Some((stats, b.grad)))
    }

    fn apply(&mut self, encoder_grad: Option<EncoderParams>, classifier_grad: Option<ClassifierParams>) {
        let mut e = encoder_grad.map(|g| g.flatten());
        let mut c = classifier_grad.map(|g| g.flatten());
        {
            let mut parts: Vec<&mut Vec<f64>> = Vec::new();
            if let Some(e) = e.as_mut() {
                parts.push(e);
            }
            if let Some(c) = c.as_mut() {
                parts.push(c);
            }
            clip_global_norm(&mut parts, self.model.config.grad_clip);
        }
        if let Some(e) = e {
            self.encoder_adam.step(&mut self.model.encoder, &e);
        }
        if let Some(c) = c {
            self.classifier_adam.step(&mut self.model.classifier, &c);
        }
    }

    /// Cross-entropy update of classifier and encoder. Returns the loss, or
    /// `None` when the batch has no scored utterance.
    pub fn ce_step(&mut self, dialogs: &[&Dialog]) -> Result<Option<f64>> {
        let fwd = self.forward(dialogs)?;
        let Some((loss, cls_grad, d_reps)) = self.ce_grads(&fwd)? else {
            return Ok(None);
        };
        let enc_grad = self.encoder_grad(&fwd, &d_reps);
        self.apply(Some(enc_grad), Some(cls_grad));
        Ok(Some(loss))
    }

    /// Triplet update of the encoder. Returns `None` when the batch cannot
    /// form a triplet.
    pub fn triplet_step(&mut self, dialogs: &[&Dialog]) -> Result<Option<TripletStepStats>> {
        let fwd = self.forward(dialogs)?;
        let Some((stats, d_reps)) = self.triplet_grads(&fwd)? else {
            return Ok(None);
        };
        if stats.active > 0 {
            let enc_grad = self.encoder_grad(&fwd, &d_reps);
            self.apply(Some(enc_grad), None);
        }
        Ok(Some(stats))
    }

    fn summed_step(&mut self, dialogs: &[&Dialog]) -> Result<(Option<f64>, Option<TripletStepStats>)> {
        let fwd = self.forward(dialogs)?;
        let ce = self.ce_grads(&fwd)?;
        let trip = self.triplet_grads(&fwd)?;
        let mut d_reps = Array2::zeros(fwd.reps.raw_dim());
        let mut ce_loss = None;
        let mut cls_grad = None;
        if let Some((loss, g, d)) = ce {
            ce_loss = Some(loss);
            cls_grad = Some(g);
            d_reps += &d;
        }
        if let Some((_, d)) = &trip {
            d_reps.scaled_add(self.model.config.lambda, d);
        }
        let stats = trip.map(|(s, _)| s);
        if ce_loss.is_some() || stats.is_some_and(|s| s.active > 0) {
            let enc_grad = self.encoder_grad(&fwd, &d_reps);
            self.apply(Some(enc_grad), cls_grad);
        }
        Ok((ce_loss, stats))
    }

    /// One training step on a batch of dialogs under the configured loss
    /// mode.
    pub fn step(&mut self, dialogs: &[&Dialog]) -> Result<StepRecord> {
        let (ce, trip) = match self.model.config.loss_mode {
            LossMode::Alternating => {
                let ce = self.ce_step(dialogs)?;
                (ce, self.triplet_step(dialogs)?)
            }
            LossMode::Summed => self.summed_step(dialogs)?,
            LossMode::CrossEntropyOnly => (self.ce_step(dialogs)?, None),
        };
        self.steps += 1;
        let uses_triplets = self.model.config.loss_mode != LossMode::CrossEntropyOnly;
        if uses_triplets && trip.is_none() {
            debug!("step {}: batch cannot form a triplet, triplet update skipped", self.steps);
        }
        Ok(StepRecord {
            step: self.steps,
            epoch: 0,
            ce,
            triplet: trip.map(|t| t.loss),
            active_triplets: trip.map_or(0, |t| t.active),
            triplets: trip.map_or(0, |t| t.total),
            triplet_skipped: uses_triplets && trip.is_none(),
        })
    }
}

/// Dialog order for one epoch. The balanced sampler draws dialogs with
/// replacement, weighted by the rarest scored label they contain.
fn epoch_order(
    corpus: &Corpus,
    space: LabelSpace,
    weights: &BTreeMap<EmotionLabel, f64>,
    balanced: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let n = corpus.dialogs.len();
    if !balanced {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        return Ok(order);
    }
    let dialog_weights: Vec<f64> = corpus
        .dialogs
        .iter()
        .map(|d| {
            d.labels()
                .filter(|&l| space.contains(l))
                .filter_map(|l| weights.get(&l).copied())
                .fold(0.0, f64::max)
        })
        .collect();
    let dist = WeightedIndex::new(&dialog_weights).map_err(|_| TrainError::EmptyTrainSplit)?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

pub fn initial_model(
    store: &SentenceEmbeddingStore,
    config: &TrainConfig,
    classifier: ClassifierParams,
) -> Result<ContextualModel> {
    let dim = store.dim();
    let encoder = init_encoder_layers(
        dim,
        config.heads,
        config.ffn_dim_for(dim),
        config.encoder_layers,
        derive_seed(config.seed, 2),
    )?;
    ContextualModel::new(encoder, classifier, config.clone(), store.provider())
}

/// Full contextual training with an optional already-pretrained classifier.
/// `on_step` receives every progress record as it is produced.
pub fn train_contextual_with(
    corpus: &Corpus,
    store: &SentenceEmbeddingStore,
    config: &TrainConfig,
    classifier: Option<ClassifierParams>,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<(ContextualModel, Vec<StepRecord>)> {
    config.validate()?;
    let classifier = match classifier {
        Some(c) => c,
        None => pretrain_classifier(corpus, store, config)?,
    };
    let model = initial_model(store, config, classifier)?;
    let mut trainer = ContextualTrainer::new(model, store, corpus)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(4);
    let mut history = Vec::new();
    'epochs: for epoch in 1..=config.epochs {
        let order = epoch_order(
            corpus,
            trainer.model.label_space(),
            &trainer.triplet_weights,
            config.balanced_sampler,
            &mut order_rng,
        )?;
        for chunk in order.chunks(config.dialogs_per_batch) {
            if config.max_steps.is_some_and(|m| trainer.steps_taken() >= m) {
                break 'epochs;
            }
            let dialogs: Vec<&Dialog> = chunk.iter().map(|&i| &corpus.dialogs[i]).collect();
            let mut record = trainer.step(&dialogs)?;
            record.epoch = epoch;
            on_step(&record);
            history.push(record);
        }
        info!("epoch {epoch} done after {} steps", trainer.steps_taken());
    }
    Ok((trainer.model, history))
}

pub fn train_contextual(
    corpus: &Corpus,
    store: &SentenceEmbeddingStore,
    config: &TrainConfig,
) -> Result<ContextualModel> {
    train_contextual_with(corpus, store, config, None, &mut |_| {}).map(|(m, _)| m)
}

/// Contextual representations of one dialog under `model`.
pub fn contextual_rows(model: &ContextualModel, dialog: &Dialog, store: &SentenceEmbeddingStore) -> Result<Array2<f64>> {
    let seq = build_dialog_sequence(dialog, store, &model.encoder)?;
    let (out, _) = encoder_forward_cached(&seq, &model.encoder)?;
    Ok(split_contextual(&out, &seq.sep_positions)?)
}

/// One predicted label per utterance.
pub fn predict(model: &ContextualModel, dialog: &Dialog, store: &SentenceEmbeddingStore) -> Result<Vec<EmotionLabel>> {
    let reps = contextual_rows(model, dialog, store)?;
    let logits = classify_rows(&reps, &model.classifier)?;
    Ok(logits.rows().into_iter().map(|r| model.classifier.label_of(r)).collect())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalOptions {
    pub neutral_policy: NeutralPolicy,
    pub include_neutral: bool,
}

fn report_from_pairs(
    pairs: Vec<(EmotionLabel, EmotionLabel)>,
    opts: &EvalOptions,
    config: &TrainConfig,
) -> Result<MetricsReport> {
    let (golds, preds): (Vec<EmotionLabel>, Vec<EmotionLabel>) = pairs.into_iter().unzip();
    let m = confusion(&preds, &golds, &ClassLabel::all_emotions())?;
    Ok(MetricsReport::from_confusion(
        &m,
        &ReportOptions {
            neutral_policy: opts.neutral_policy,
            include_neutral: opts.include_neutral,
            population: "all-utterances".to_string(),
            seed: Some(config.seed),
            config_echo: config.echo(),
        },
    )?)
}

/// Scores every utterance of `corpus` whose gold label is in the model's
/// label space. Dialogs are predicted in parallel; results are merged in
/// corpus order.
pub fn evaluate(
    model: &ContextualModel,
    corpus: &Corpus,
    store: &SentenceEmbeddingStore,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let space = model.label_space();
    let per_dialog: Vec<Vec<(EmotionLabel, EmotionLabel)>> = corpus
        .dialogs
        .par_iter()
        .map(|d| {
            let preds = predict(model, d, store)?;
            Ok(d.labels()
                .zip(preds)
                .filter(|(g, _)| space.contains(*g))
                .collect())
        })
        .collect::<Result<_>>()?;
    report_from_pairs(per_dialog.into_iter().flatten().collect(), opts, &model.config)
}

/// Train and test data for [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Corpus,
    pub test: Corpus,
    pub store: SentenceEmbeddingStore,
}

/// `n_runs` independent trainings with seeds `seed, seed + 1, ...`, each
/// scored on the test split.
pub fn run_experiment(
    data: &ExperimentData,
    config: &TrainConfig,
    n_runs: usize,
    opts: &EvalOptions,
) -> Result<Vec<MetricsReport>> {
    if n_runs == 0 {
        return Err(TrainError::InvalidConfig("n_runs must be at least 1".into()));
    }
    (0..n_runs as u64)
        .map(|i| {
            let cfg = TrainConfig {
                seed: config.seed + i,
                ..config.clone()
            };
            let model = train_contextual(&data.train, &data.store, &cfg)?;
            evaluate(&model, &data.test, &data.store, opts)
        })
        .collect()
}

/// Siamese sub-network of the isolated-utterance baseline.
#[derive(Debug, Clone, PartialEq)]
pub enum IsolatedNet {
    /// Affine map of the mean-pooled word vectors.
    Linear(Linear),
    /// LSTM over the word vectors; the final hidden state is the output.
    Lstm(Lstm),
}

impl IsolatedNet {
    pub fn input_dim(&self) -> usize {
        match self {
            IsolatedNet::Linear(l) => l.input_dim(),
            IsolatedNet::Lstm(l) => l.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            IsolatedNet::Linear(l) => l.output_dim(),
            IsolatedNet::Lstm(l) => l.hidden_dim(),
        }
    }

    pub fn kind(&self) -> Subnetwork {
        match self {
            IsolatedNet::Linear(_) => Subnetwork::Linear,
            IsolatedNet::Lstm(_) => Subnetwork::Lstm,
        }
    }
}

impl Parameters for IsolatedNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        match self {
            IsolatedNet::Linear(l) => l.visit(&join(prefix, "linear"), f),
            IsolatedNet::Lstm(l) => l.visit(&join(prefix, "lstm"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        match self {
            IsolatedNet::Linear(l) => l.visit_mut(&join(prefix, "linear"), f),
            IsolatedNet::Lstm(l) => l.visit_mut(&join(prefix, "lstm"), f),
        }
    }
}

/// Input of the isolated sub-network for one utterance.
#[derive(Debug, Clone)]
enum IsolatedInput {
    Pooled(Array1<f64>),
    Sequence(Array2<f64>),
}

fn isolated_input(net: &IsolatedNet, u: &Utterance, table: &WordEmbeddingTable) -> Result<IsolatedInput> {
    let words = embed_words(u, table);
    Ok(match net {
        IsolatedNet::Linear(_) => IsolatedInput::Pooled(mean_pool(&words)?),
        IsolatedNet::Lstm(_) => {
            let views: Vec<_> = words.iter().map(|w| w.view()).collect();
            IsolatedInput::Sequence(ndarray::stack(Axis(0), &views).map_err(|_| EmbeddingError::MixedDimensions)?)
        }
    })
}

fn isolated_forward(net: &IsolatedNet, input: &IsolatedInput) -> Array1<f64> {
    match (net, input) {
        (IsolatedNet::Linear(l), IsolatedInput::Pooled(x)) => {
            l.forward(&x.clone().insert_axis(Axis(0))).row(0).to_owned()
        }
        (IsolatedNet::Lstm(l), IsolatedInput::Sequence(xs)) => l.forward(xs).0,
        _ => unreachable!("input kind follows the network kind"),
    }
}

/// Isolated baseline: sub-network plus the per-label centroids of the train
/// split in its output space, used for nearest-centroid prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct IsolatedModel {
    pub net: IsolatedNet,
    pub centroids: BTreeMap<EmotionLabel, Array1<f64>>,
    pub config: TrainConfig,
}

impl IsolatedModel {
    pub fn embed(&self, u: &Utterance, table: &WordEmbeddingTable) -> Result<Array1<f64>> {
        Ok(isolated_forward(&self.net, &isolated_input(&self.net, u, table)?))
    }

    /// Nearest centroid; ties go to the lowest label id.
    pub fn predict(&self, u: &Utterance, table: &WordEmbeddingTable) -> Result<EmotionLabel> {
        let e = self.embed(u, table)?;
        let mut best: Option<(EmotionLabel, f64)> = None;
        for (&label, c) in &self.centroids {
            let d = (&e - c).mapv(|v| v * v).sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((label, d));
            }
        }
        Ok(best.map_or(EmotionLabel::Neutral, |(l, _)| l))
    }
}

fn isolated_pool(
    corpus: &Corpus,
    space: LabelSpace,
    net: &IsolatedNet,
    table: &WordEmbeddingTable,
) -> Result<(Vec<IsolatedInput>, Vec<EmotionLabel>)> {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for d in &corpus.dialogs {
        for u in d.utterances.iter().filter(|u| space.contains(u.label)) {
            inputs.push(isolated_input(net, u, table)?);
            labels.push(u.label);
        }
    }
    if inputs.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    Ok((inputs, labels))
}

/// Trains the isolated baseline on randomly sampled triplets. Returns the
/// model and the per-step mean triplet loss.
pub fn train_isolated(
    corpus: &Corpus,
    table: &WordEmbeddingTable,
    config: &TrainConfig,
) -> Result<(IsolatedModel, Vec<f64>)> {
    config.validate()?;
    let triplet_cfg = config.triplet_config()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(5);
    let mut net = match config.subnetwork {
        Subnetwork::Linear => IsolatedNet::Linear(Linear::new(table.dim(), config.isolated_dim, &mut rng)),
        Subnetwork::Lstm => IsolatedNet::Lstm(Lstm::new(table.dim(), config.isolated_dim, &mut rng)),
    };
    let (inputs, labels) = isolated_pool(corpus, config.label_space, &net, table)?;
    let mut counts = BTreeMap::new();
    for &l in &labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let weights = if config.balanced_sampler {
        present_label_weights(&counts)
    } else {
        counts.keys().map(|&l| (l, 1.0)).collect()
    };
    let pool: Vec<(usize, EmotionLabel)> = labels.iter().copied().enumerate().collect();
    let per_epoch = labels.len().div_ceil(config.batch_size);
    let steps = config.max_steps.unwrap_or(config.epochs * per_epoch);
    let mut adam = Adam::new(config.learning_rate);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let triplets = sample_triplets(&pool, config.batch_size, &weights, &mut rng)?;
        let mut rows: Vec<usize> = triplets
            .iter()
            .flat_map(|t| [t.anchor, t.positive, t.negative])
            .collect();
        rows.sort_unstable();
        rows.dedup();
        let local: BTreeMap<usize, usize> = rows.iter().enumerate().map(|(k, &r)| (r, k)).collect();
        let out_rows: Vec<Array1<f64>> = rows.iter().map(|&r| isolated_forward(&net, &inputs[r])).collect();
        let views: Vec<_> = out_rows.iter().map(|r| r.view()).collect();
        let out = ndarray::stack(Axis(0), &views).expect("equal output dims");
        let local_triplets: Vec<Triplet<usize>> = triplets.into_iter().map(|t| t.map(|r| local[&r])).collect();
        let b = batch_triplet_loss(&out, &local_triplets, &triplet_cfg)?;
        losses.push(b.loss);
        debug!("isolated step={step} triplet={:.6} active={}", b.loss, b.n_active);
        if b.n_active == 0 {
            continue;
        }
        let mut grad = zeros_like(&net);
        match (&net, &mut grad) {
            (IsolatedNet::Linear(l), IsolatedNet::Linear(g)) => {
                let x_views: Vec<_> = rows
                    .iter()
                    .map(|&r| match &inputs[r] {
                        IsolatedInput::Pooled(x) => x.view(),
                        IsolatedInput::Sequence(_) => unreachable!(),
                    })
                    .collect();
                let x = ndarray::stack(Axis(0), &x_views).expect("equal input dims");
                l.backward(&x, &b.grad, g);
            }
            (IsolatedNet::Lstm(l), IsolatedNet::Lstm(g)) => {
                for (k, &r) in rows.iter().enumerate() {
                    if let IsolatedInput::Sequence(xs) = &inputs[r] {
                        let (_, cache) = l.forward(xs);
                        l.backward(&cache, &b.grad.row(k).to_owned(), g);
                    }
                }
            }
            _ => unreachable!("gradient mirrors the network"),
        }
        let mut flat = grad.flatten();
        clip_global_norm(&mut [&mut flat], config.grad_clip);
        adam.step(&mut net, &flat);
    }
    let mut sums: BTreeMap<EmotionLabel, (Array1<f64>, usize)> = BTreeMap::new();
    for (input, &label) in inputs.iter().zip(&labels) {
        let e = isolated_forward(&net, input);
        let entry = sums
            .entry(label)
            .or_insert_with(|| (Array1::zeros(e.len()), 0));
        entry.0 += &e;
        entry.1 += 1;
    }
    let centroids = sums.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect();
    Ok((
        IsolatedModel {
            net,
            centroids,
            config: config.clone(),
        },
        losses,
    ))
}

pub fn evaluate_isolated(
    model: &IsolatedModel,
    corpus: &Corpus,
    table: &WordEmbeddingTable,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let space = model.config.label_space;
    let pairs: Vec<(EmotionLabel, EmotionLabel)> = corpus
        .dialogs
        .par_iter()
        .map(|d| {
            d.utterances
                .iter()
                .filter(|u| space.contains(u.label))
                .map(|u| Ok((u.label, model.predict(u, table)?)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    report_from_pairs(pairs, opts, &model.config)
}

/// Weighted-random triplets over every utterance of `corpus` whose label is
/// in `space`. With `balanced`, anchors follow inverse label frequency;
/// otherwise every utterance is an equally likely anchor.
pub fn sample_corpus_triplets(
    corpus: &Corpus,
    space: LabelSpace,
    count: usize,
    balanced: bool,
    seed: u64,
) -> Result<Vec<Triplet<UtteranceRef>>> {
    let pool: Vec<(UtteranceRef, EmotionLabel)> = corpus
        .dialogs
        .iter()
        .flat_map(|d| {
            d.utterances.iter().filter(|u| space.contains(u.label)).map(|u| {
                let r = UtteranceRef {
                    dialog_id: d.id.clone(),
                    index: u.index,
                };
                (r, u.label)
            })
        })
        .collect();
    let mut counts = BTreeMap::new();
    for (_, l) in &pool {
        *counts.entry(*l).or_insert(0usize) += 1;
    }
    let weights = if balanced {
        present_label_weights(&counts)
    } else {
        counts.keys().map(|&l| (l, 1.0)).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(6);
    Ok(sample_triplets(&pool, count, &weights, &mut rng)?)
}

/// Accuracy over the emotional gold labels of `corpus`.
pub fn emotional_accuracy(model: &ContextualModel, corpus: &Corpus, store: &SentenceEmbeddingStore) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for d in &corpus.dialogs {
        for (gold, pred) in d.labels().zip(predict(model, d, store)?) {
            if gold.is_emotional() {
                total += 1;
                hit += usize::from(gold == pred);
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::OovPolicy;
    use crate::synthetic::separable_fixture;
    use crate::triplet::distance;

    fn small_config() -> TrainConfig {
        TrainConfig {
            heads: 2,
            pretrain_steps: Some(50),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { margin: 0.0, ..TrainConfig::default() },
            TrainConfig { loss_mode: LossMode::Summed, lambda: 0.0, ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
        let text = toml::to_string(&TrainConfig::default()).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, TrainConfig::default());
    }

    #[test]
    fn contextual_training_is_deterministic_and_keeps_store() {
        let (corpus, store) = separable_fixture(12, 8, 3);
        let before = store.clone();
        let cfg = TrainConfig { epochs: 2, ..small_config() };
        let (a, ha) = train_contextual_with(&corpus, &store, &cfg, None, &mut |_| {}).unwrap();
        let (b, hb) = train_contextual_with(&corpus, &store, &cfg, None, &mut |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert_eq!(store, before);
        let d = &corpus.dialogs[0];
        let p = predict(&a, d, &store).unwrap();
        assert_eq!(p.len(), d.len());
        assert_eq!(p, predict(&a, d, &store).unwrap());
    }

    #[test]
    fn both_losses_reach_the_encoder() {
        let (corpus, store) = separable_fixture(6, 8, 4);
        let cfg = small_config();
        let classifier = pretrain_classifier(&corpus, &store, &cfg).unwrap();
        let model = initial_model(&store, &cfg, classifier).unwrap();
        let before = model.encoder.clone();
        let mut trainer = ContextualTrainer::new(model, &store, &corpus).unwrap();
        let dialogs: Vec<&Dialog> = corpus.dialogs.iter().collect();
        trainer.ce_step(&dialogs).unwrap().unwrap();
        let after_ce = trainer.model.encoder.clone();
        let stats = trainer.triplet_step(&dialogs).unwrap().unwrap();
        assert!(stats.active > 0);
        assert_ne!(after_ce, before);
        assert_ne!(trainer.model.encoder, after_ce);
    }

    #[test]
    fn single_label_batch_skips_triplets() {
        let (corpus, store) = separable_fixture(8, 8, 5);
        let cfg = small_config();
        let classifier = pretrain_classifier(&corpus, &store, &cfg).unwrap();
        let model = initial_model(&store, &cfg, classifier).unwrap();
        let mut trainer = ContextualTrainer::new(model, &store, &corpus).unwrap();
        let mut lonely = corpus.dialogs[0].clone();
        lonely.utterances.truncate(1);
        let before = trainer.model.classifier.clone();
        let record = trainer.step(&[&lonely]).unwrap();
        assert!(record.triplet_skipped);
        assert!(record.ce.is_some());
        assert_ne!(trainer.model.classifier, before);
    }

    #[test]
    fn summed_and_ce_only_modes_run() {
        let (corpus, store) = separable_fixture(8, 8, 6);
        for mode in [LossMode::Summed, LossMode::CrossEntropyOnly] {
            let cfg = TrainConfig { loss_mode: mode, epochs: 1, ..small_config() };
            let (_, hist) = train_contextual_with(&corpus, &store, &cfg, None, &mut |_| {}).unwrap();
            assert!(!hist.is_empty());
            if mode == LossMode::CrossEntropyOnly {
                assert!(hist.iter().all(|r| r.triplet.is_none() && !r.triplet_skipped));
            }
        }
    }

    #[test]
    fn strategies_run() {
        let (corpus, store) = separable_fixture(8, 8, 7);
        for strategy in [SamplingStrategy::BatchHard, SamplingStrategy::WeightedRandom] {
            let cfg = TrainConfig { sampling_strategy: strategy, epochs: 1, ..small_config() };
            let (_, hist) = train_contextual_with(&corpus, &store, &cfg, None, &mut |_| {}).unwrap();
            assert!(hist.iter().any(|r| r.triplets > 0));
        }
    }

    #[test]
    fn loss_decreases_on_fixture() {
        let (corpus, store) = separable_fixture(20, 16, 8);
        let cfg = TrainConfig { heads: 4, ..TrainConfig::default() };
        let (_, hist) = train_contextual_with(&corpus, &store, &cfg, None, &mut |_| {}).unwrap();
        let mean = |e: usize| {
            let v: Vec<f64> = hist.iter().filter(|r| r.epoch == e).map(|r| r.total_loss(1.0)).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(5) < mean(1), "{} vs {}", mean(5), mean(1));
    }

    #[test]
    fn progress_line_format() {
        let r = StepRecord {
            step: 3,
            epoch: 1,
            ce: Some(0.5),
            triplet: None,
            active_triplets: 0,
            triplets: 0,
            triplet_skipped: true,
        };
        assert_eq!(r.to_string(), "step=3 epoch=1 ce=0.500000 triplet=skipped active=0 triplets=0");
    }

    fn two_label_words() -> (Corpus, WordEmbeddingTable) {
        let mut table = WordEmbeddingTable::empty(4, OovPolicy::Zero).unwrap();
        for i in 0..5 {
            let t = i as f64 * 0.05;
            table.insert(&format!("up{i}"), ndarray::array![1.0, t, 0.0, 0.2]).unwrap();
            table.insert(&format!("down{i}"), ndarray::array![-1.0, 0.0, t, 0.2]).unwrap();
        }
        let mut text = String::new();
        let mut labels = String::new();
        for d in 0..10 {
            let (a, b) = (d % 5, (d + 2) % 5);
            text.push_str(&format!("up{a} up{b} __eou__ down{b} down{a} __eou__ up{b} __eou__\n"));
            labels.push_str("4 5 4\n");
        }
        let corpus = crate::corpus::read_split(text.as_bytes(), labels.as_bytes(), crate::corpus::Split::Train).unwrap();
        (corpus, table)
    }

    fn separation(model: &IsolatedModel, corpus: &Corpus, table: &WordEmbeddingTable) -> (f64, f64) {
        let items: Vec<(EmotionLabel, Array1<f64>)> = corpus
            .dialogs
            .iter()
            .flat_map(|d| d.utterances.iter())
            .map(|u| (u.label, model.embed(u, table).unwrap()))
            .collect();
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
        for i in 0..items.len() {
            for j in i + 1..items.len() {
                let d = distance(items[i].1.view(), items[j].1.view(), Distance::Euclidean).unwrap();
                if items[i].0 == items[j].0 {
                    intra += d;
                    ni += 1;
                } else {
                    inter += d;
                    nx += 1;
                }
            }
        }
        (intra / ni as f64, inter / nx as f64)
    }

    #[test]
    fn isolated_baselines_separate_labels() {
        let (corpus, table) = two_label_words();
        for subnetwork in [Subnetwork::Linear, Subnetwork::Lstm] {
            let cfg = TrainConfig {
                subnetwork,
                isolated_dim: 8,
                batch_size: 16,
                max_steps: Some(100),
                learning_rate: 1e-2,
                ..TrainConfig::default()
            };
            let (model, losses) = train_isolated(&corpus, &table, &cfg).unwrap();
            let (_, again) = train_isolated(&corpus, &table, &cfg).unwrap();
            assert_eq!(losses, again);
            let (intra, inter) = separation(&model, &corpus, &table);
            assert!(intra < inter, "{subnetwork:?}: {intra} vs {inter}");
            let report = evaluate_isolated(&model, &corpus, &table, &EvalOptions::default()).unwrap();
            assert!(report.macro_f1_star > 0.0);
        }
    }

    #[test]
    fn experiment_runs_are_reproducible() {
        let (train, store) = separable_fixture(8, 8, 9);
        let data = ExperimentData {
            test: train.clone(),
            train,
            store,
        };
        let cfg = TrainConfig { epochs: 1, ..small_config() };
        let a = run_experiment(&data, &cfg, 2, &EvalOptions::default()).unwrap();
        let b = run_experiment(&data, &cfg, 2, &EvalOptions::default()).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a, b);
        assert_eq!(a[1].seed, Some(1));
        assert_eq!(run_experiment(&data, &cfg, 1, &EvalOptions::default()).unwrap().len(), 1);
    }
}
