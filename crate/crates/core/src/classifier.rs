//! Utterance-level emotion head: one encoder layer applied to each utterance
//! vector as a length-1 sequence, followed by a linear map to label logits.

use std::collections::BTreeMap;

use log::debug;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, EmotionLabel, LabelSpace};
use crate::embedding::{utterance_key, SentenceEmbeddingStore};
use crate::nn::{
    clip_global_norm, join, softmax, zeros_like, Adam, EncoderLayer, EncoderLayerCache, Linear,
    Parameters,
};
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("expected a {expected}-dim representation, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("label `{0}` is not in the classifier's label space")]
    BadTarget(EmotionLabel),
    #[error("cannot compute class weights of an empty batch")]
    EmptyBatch,
    #[error("class weight for `{0}` must be positive and finite")]
    BadWeight(EmotionLabel),
    #[error("dimension {dim} is not divisible by {heads} heads")]
    BadHeadCount { dim: usize, heads: usize },
    #[error("no embedding for utterance `{0}`")]
    MissingEmbedding(String),
    #[error("no training utterances in the label space")]
    NoTrainingData,
}

pub type Result<T, E = ClassifierError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub encoder: EncoderLayer,
    pub linear: Linear,
    pub label_space: LabelSpace,
}

impl ClassifierParams {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        label_space: LabelSpace,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim == 0 || dim % heads != 0 {
            return Err(ClassifierError::BadHeadCount { dim, heads });
        }
        Ok(Self {
            encoder: EncoderLayer::new(dim, heads, ffn_dim, rng),
            linear: Linear::new(dim, label_space.len(), rng),
            label_space,
        })
    }

    pub fn dim(&self) -> usize {
        self.linear.input_dim()
    }

    pub fn n_labels(&self) -> usize {
        self.linear.output_dim()
    }

    /// Label of the highest logit.
    pub fn label_of(&self, logits: ArrayView1<f64>) -> EmotionLabel {
        self.label_space.labels()[argmax(logits)]
    }
}

impl Parameters for ClassifierParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.linear.visit(&join(prefix, "linear"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.linear.visit_mut(&join(prefix, "linear"), f);
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct ClassifierCache {
    rows: Vec<EncoderLayerCache>,
    hidden: Array2<f64>,
}

fn check_dim(params: &ClassifierParams, found: usize) -> Result<()> {
    if found == params.dim() {
        Ok(())
    } else {
        Err(ClassifierError::DimMismatch {
            expected: params.dim(),
            found,
        })
    }
}

pub fn classify(representation: ArrayView1<f64>, params: &ClassifierParams) -> Result<Array1<f64>> {
    let x = representation.to_owned().insert_axis(Axis(0));
    Ok(classify_rows(&x, params)?.row(0).to_owned())
}

/// Logits for every row of `x`, each row classified independently.
pub fn classify_rows(x: &Array2<f64>, params: &ClassifierParams) -> Result<Array2<f64>> {
    classify_rows_cached(x, params).map(|(logits, _)| logits)
}

pub fn classify_rows_cached(
    x: &Array2<f64>,
    params: &ClassifierParams,
) -> Result<(Array2<f64>, ClassifierCache)> {
    check_dim(params, x.ncols())?;
    let mut hidden = Array2::zeros(x.raw_dim());
    let mut rows = Vec::with_capacity(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let (h, cache) = params.encoder.forward(&row.to_owned().insert_axis(Axis(0)));
        hidden.row_mut(i).assign(&h.row(0));
        rows.push(cache);
    }
    let logits = params.linear.forward(&hidden);
    Ok((logits, ClassifierCache { rows, hidden }))
}

/// Accumulates parameter gradients and returns the gradient w.r.t. the input
/// rows.
pub fn classifier_backward(
    params: &ClassifierParams,
    cache: &ClassifierCache,
    d_logits: &Array2<f64>,
    grad: &mut ClassifierParams,
) -> Array2<f64> {
    let d_hidden = params.linear.backward(&cache.hidden, d_logits, &mut grad.linear);
    let mut d_x = Array2::zeros(d_hidden.raw_dim());
    for (i, row_cache) in cache.rows.iter().enumerate() {
        let d_row = d_hidden.row(i).to_owned().insert_axis(Axis(0));
        let d_in = params.encoder.backward(row_cache, &d_row, &mut grad.encoder);
        d_x.row_mut(i).assign(&d_in.row(0));
    }
    d_x
}

/// Per-label cross-entropy weights. Labels without an entry weigh 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(BTreeMap<EmotionLabel, f64>);

impl ClassWeights {
    pub fn uniform() -> Self {
        Self::default()
    }

    pub fn new(weights: BTreeMap<EmotionLabel, f64>) -> Result<Self> {
        for (&l, &w) in &weights {
            if !(w > 0.0 && w.is_finite()) {
                return Err(ClassifierError::BadWeight(l));
            }
        }
        Ok(Self(weights))
    }

    pub fn get(&self, label: EmotionLabel) -> f64 {
        self.0.get(&label).copied().unwrap_or(1.0)
    }

    pub fn as_map(&self) -> &BTreeMap<EmotionLabel, f64> {
        &self.0
    }
}

/// `-w(target) * log softmax(logits)[target]`.
pub fn weighted_cross_entropy(
    logits: ArrayView1<f64>,
    target: EmotionLabel,
    label_space: LabelSpace,
    weights: &ClassWeights,
) -> Result<f64> {
    weighted_cross_entropy_grad(logits, target, label_space, weights).map(|(l, _)| l)
}

/// Loss and its gradient w.r.t. the logits, `w * (softmax - onehot)`.
pub fn weighted_cross_entropy_grad(
    logits: ArrayView1<f64>,
    target: EmotionLabel,
    label_space: LabelSpace,
    weights: &ClassWeights,
) -> Result<(f64, Array1<f64>)> {
    let t = label_space
        .index_of(target)
        .filter(|&t| t < logits.len())
        .ok_or(ClassifierError::BadTarget(target))?;
    let w = weights.get(target);
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let log_sum = logits.mapv(|v| (v - max).exp()).sum().ln() + max;
    let loss = w * (log_sum - logits[t]);
    let mut grad = softmax(&logits.to_owned());
    grad[t] -= 1.0;
    grad *= w;
    Ok((loss.max(0.0), grad))
}

/// `batch_size / (K_present * count(label))` for every label present.
pub fn batch_class_weights(batch_labels: &[EmotionLabel]) -> Result<ClassWeights> {
    if batch_labels.is_empty() {
        return Err(ClassifierError::EmptyBatch);
    }
    let mut counts: BTreeMap<EmotionLabel, usize> = BTreeMap::new();
    for &l in batch_labels {
        *counts.entry(l).or_default() += 1;
    }
    let n = batch_labels.len() as f64;
    let k = counts.len() as f64;
    Ok(ClassWeights(
        counts.into_iter().map(|(l, c)| (l, n / (k * c as f64))).collect(),
    ))
}

/// Mean weighted cross-entropy over the rows of `logits`, with its gradient.
pub fn batch_cross_entropy(
    logits: &Array2<f64>,
    targets: &[EmotionLabel],
    label_space: LabelSpace,
    weights: &ClassWeights,
) -> Result<(f64, Array2<f64>)> {
    let n = targets.len().max(1) as f64;
    let mut total = 0.0;
    let mut d_logits = Array2::zeros(logits.raw_dim());
    for (i, &target) in targets.iter().enumerate() {
        let (loss, g) = weighted_cross_entropy_grad(logits.row(i), target, label_space, weights)?;
        total += loss;
        d_logits.row_mut(i).assign(&(g / n));
    }
    Ok((total / n, d_logits))
}

/// Sampling weight per label: inverse frequency over the labels that
/// actually occur, normalized to sum 1.
pub fn present_label_weights(counts: &BTreeMap<EmotionLabel, usize>) -> BTreeMap<EmotionLabel, f64> {
    let raw: BTreeMap<EmotionLabel, f64> = counts
        .iter()
        .filter(|(_, &c)| c > 0)
        .map(|(&l, &c)| (l, 1.0 / c as f64))
        .collect();
    let total: f64 = raw.values().sum();
    raw.into_iter().map(|(l, w)| (l, w / total)).collect()
}

/// Training examples for the standalone classifier: every train utterance
/// whose gold label lies in `label_space`, with its sentence embedding.
pub fn pretraining_pool(
    corpus: &Corpus,
    store: &SentenceEmbeddingStore,
    label_space: LabelSpace,
) -> Result<(Array2<f64>, Vec<EmotionLabel>)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for dialog in &corpus.dialogs {
        for u in &dialog.utterances {
            if !label_space.contains(u.label) {
                continue;
            }
            let key = utterance_key(&dialog.id, u.index);
            let v = store.get(&key).ok_or(ClassifierError::MissingEmbedding(key))?;
            rows.push(v.view());
            labels.push(u.label);
        }
    }
    if rows.is_empty() {
        return Err(ClassifierError::NoTrainingData);
    }
    let x = ndarray::stack(Axis(0), &rows).map_err(|_| ClassifierError::DimMismatch {
        expected: store.dim(),
        found: rows.iter().map(|r| r.len()).find(|&l| l != store.dim()).unwrap_or(0),
    })?;
    Ok((x, labels))
}

/// Batches of row indices, either drawn with the inverse-frequency weighted
/// sampler or as shuffled passes over the data.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    weighted: Option<WeightedIndex<f64>>,
    batch_size: usize,
}

impl BatchSampler {
    pub(crate) fn new(labels: &[EmotionLabel], batch_size: usize, balanced: bool) -> Self {
        let weighted = balanced.then(|| {
            let mut counts = BTreeMap::new();
            for &l in labels {
                *counts.entry(l).or_insert(0usize) += 1;
            }
            let w = present_label_weights(&counts);
            WeightedIndex::new(labels.iter().map(|l| w[l])).expect("positive weights")
        });
        Self {
            order: (0..labels.len()).collect(),
            cursor: labels.len(),
            weighted,
            batch_size: batch_size.max(1),
        }
    }

    pub(crate) fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<usize> {
        if let Some(w) = &self.weighted {
            return (0..self.batch_size).map(|_| w.sample(rng)).collect();
        }
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size.min(self.order.len()) {
            if self.cursor >= self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// One optimizer step of weighted cross-entropy on a batch of rows.
pub fn classifier_step(
    params: &mut ClassifierParams,
    adam: &mut Adam,
    x: &Array2<f64>,
    targets: &[EmotionLabel],
    weighted_ce: bool,
    grad_clip: f64,
) -> Result<f64> {
    let weights = if weighted_ce {
        batch_class_weights(targets)?
    } else {
        ClassWeights::uniform()
    };
    let (logits, cache) = classify_rows_cached(x, params)?;
    let (loss, d_logits) = batch_cross_entropy(&logits, targets, params.label_space, &weights)?;
    let mut grad = zeros_like(params);
    classifier_backward(params, &cache, &d_logits, &mut grad);
    let mut flat = grad.flatten();
    clip_global_norm(&mut [&mut flat], grad_clip);
    adam.step(params, &flat);
    Ok(loss)
}

/// Trains the classifier on isolated sentence embeddings of the train split.
pub fn pretrain_classifier(
    corpus: &Corpus,
    store: &SentenceEmbeddingStore,
    config: &TrainConfig,
) -> Result<ClassifierParams> {
    let (x, labels) = pretraining_pool(corpus, store, config.label_space)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let dim = x.ncols();
    let mut params = ClassifierParams::new(
        dim,
        config.heads,
        config.ffn_dim_for(dim),
        config.label_space,
        &mut rng,
    )?;
    let mut adam = Adam::new(config.learning_rate);
    let mut sampler = BatchSampler::new(&labels, config.batch_size, config.balanced_sampler);
    let per_epoch = labels.len().div_ceil(config.batch_size.max(1));
    let steps = config
        .pretrain_steps
        .unwrap_or(config.pretrain_epochs * per_epoch);
    for step in 0..steps {
        let idx = sampler.next_batch(&mut rng);
        let xb = x.select(Axis(0), &idx);
        let yb: Vec<EmotionLabel> = idx.iter().map(|&i| labels[i]).collect();
        let loss = classifier_step(
            &mut params,
            &mut adam,
            &xb,
            &yb,
            config.weighted_ce,
            config.grad_clip,
        )?;
        debug!("pretrain step={step} ce={loss:.6}");
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{numeric_grad, relative_error};
    use crate::nn::{FeedForward, LayerNorm, MultiHeadAttention};
    use ndarray::array;
    use proptest::prelude::*;
    use EmotionLabel::*;

    fn zero_layer(dim: usize) -> EncoderLayer {
        EncoderLayer {
            attention: MultiHeadAttention {
                heads: 1,
                query: Linear::zeros(dim, dim),
                key: Linear::zeros(dim, dim),
                value: Linear::zeros(dim, dim),
                output: Linear::zeros(dim, dim),
            },
            norm1: LayerNorm::identity(dim),
            feed_forward: FeedForward {
                inner: Linear::zeros(dim, 2),
                outer: Linear::zeros(2, dim),
            },
            norm2: LayerNorm::identity(dim),
        }
    }

    #[test]
    fn hand_computed_forward() {
        // with every sublayer zeroed the encoder path is LN(LN(x)); for d=2,
        // LN((a, b)) with a > b is (1, -1) up to the epsilon term
        let mut linear = Linear::zeros(2, 7);
        linear.weight[[0, 0]] = 1.0;
        linear.weight[[1, 1]] = 1.0;
        linear.weight[[0, 2]] = 2.0;
        linear.weight[[1, 2]] = -1.0;
        linear.bias[1] = 0.5;
        let params = ClassifierParams {
            encoder: zero_layer(2),
            linear,
            label_space: LabelSpace::All,
        };
        let logits = classify_rows(&array![[3.0, 1.0]], &params).unwrap();
        let s = 1.0 / (1.0 + 1e-5f64).sqrt();
        let s = s / (s * s + 1e-5).sqrt();
        let expected = [s, -s + 0.5, 3.0 * s, 0.0, 0.0, 0.0, 0.0];
        for (a, b) in logits.row(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn arity_and_purity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ClassifierParams::new(8, 2, 16, LabelSpace::EmotionsOnly, &mut rng).unwrap();
        let x = array![0.1, -0.2, 0.3, 0.0, 1.0, 0.5, -0.4, 0.2];
        let a = classify(x.view(), &params).unwrap();
        let b = classify(x.view(), &params).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
        assert!(matches!(
            classify(array![1.0].view(), &params),
            Err(ClassifierError::DimMismatch { expected: 8, found: 1 })
        ));
    }

    #[test]
    fn rows_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = ClassifierParams::new(4, 2, 8, LabelSpace::All, &mut rng).unwrap();
        let x = array![[0.1, 0.2, 0.3, 0.4], [1.0, -1.0, 0.5, 0.0]];
        let both = classify_rows(&x, &params).unwrap();
        let second = classify(x.row(1), &params).unwrap();
        assert_eq!(both.row(1), second);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(array![1.0, 3.0, 3.0].view()), 1);
        assert_eq!(argmax(array![0.0, 0.0].view()), 0);
    }

    #[test]
    fn cross_entropy_cases() {
        let w1 = ClassWeights::uniform();
        let mut logits = Array1::from_elem(7, -30.0);
        logits[4] = 30.0;
        assert!(weighted_cross_entropy(logits.view(), Happiness, LabelSpace::All, &w1).unwrap() < 1e-9);
        let uniform = Array1::zeros(7);
        let l = weighted_cross_entropy(uniform.view(), Anger, LabelSpace::All, &w1).unwrap();
        assert!((l - 1.945910).abs() < 1e-6);
        let w2 = ClassWeights::new(BTreeMap::from([(Anger, 2.0)])).unwrap();
        let l2 = weighted_cross_entropy(uniform.view(), Anger, LabelSpace::All, &w2).unwrap();
        assert_eq!(l2, 2.0 * l);
        assert!(matches!(
            weighted_cross_entropy(Array1::zeros(6).view(), Neutral, LabelSpace::EmotionsOnly, &w1),
            Err(ClassifierError::BadTarget(Neutral))
        ));
    }

    #[test]
    fn batch_weights() {
        let w = batch_class_weights(&[Anger, Anger, Fear, Fear]).unwrap();
        assert_eq!((w.get(Anger), w.get(Fear)), (1.0, 1.0));
        let w = batch_class_weights(&[Anger, Anger, Anger, Fear]).unwrap();
        assert!((w.get(Anger) - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(w.get(Fear), 2.0);
        assert_eq!(w.get(Sadness), 1.0);
        assert_eq!(batch_class_weights(&[Anger]).unwrap().get(Anger), 1.0);
        assert!(matches!(batch_class_weights(&[]), Err(ClassifierError::EmptyBatch)));
    }

    #[test]
    fn classifier_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ClassifierParams::new(4, 2, 6, LabelSpace::All, &mut rng).unwrap();
        let x = array![[0.3, -0.1, 0.8, 0.2], [-0.5, 0.4, 0.1, 0.9], [0.0, 0.2, -0.7, 0.3]];
        let targets = [Anger, Neutral, Surprise];
        let weights = batch_class_weights(&targets).unwrap();
        let loss = |p: &ClassifierParams| {
            let logits = classify_rows(&x, p).unwrap();
            batch_cross_entropy(&logits, &targets, LabelSpace::All, &weights).unwrap().0
        };
        let (logits, cache) = classify_rows_cached(&x, &params).unwrap();
        let (_, d_logits) = batch_cross_entropy(&logits, &targets, LabelSpace::All, &weights).unwrap();
        let mut grad = zeros_like(&params);
        classifier_backward(&params, &cache, &d_logits, &mut grad);
        let num = numeric_grad(&params, 1e-5, loss);
        assert!(relative_error(&grad.flatten(), &num) < 1e-5);
    }

    #[test]
    fn pretraining_is_deterministic_and_fits() {
        let (corpus, store) = crate::synthetic::separable_fixture(20, 16, 7);
        let cfg = TrainConfig {
            pretrain_steps: Some(200),
            heads: 2,
            ..TrainConfig::default()
        };
        let a = pretrain_classifier(&corpus, &store, &cfg).unwrap();
        let b = pretrain_classifier(&corpus, &store, &cfg).unwrap();
        assert_eq!(a, b);
        let (x, labels) = pretraining_pool(&corpus, &store, LabelSpace::All).unwrap();
        let logits = classify_rows(&x, &a).unwrap();
        let (mut hit, mut total) = (0, 0);
        for (row, &gold) in logits.rows().into_iter().zip(&labels) {
            if gold.is_emotional() {
                total += 1;
                hit += usize::from(a.label_of(row) == gold);
            }
        }
        assert!(hit as f64 / total as f64 >= 0.9, "{hit}/{total}");
    }

    #[test]
    fn six_label_mode() {
        let (corpus, store) = crate::synthetic::separable_fixture(10, 8, 1);
        let cfg = TrainConfig {
            label_space: LabelSpace::EmotionsOnly,
            pretrain_steps: Some(5),
            heads: 2,
            ..TrainConfig::default()
        };
        let p = pretrain_classifier(&corpus, &store, &cfg).unwrap();
        assert_eq!(p.n_labels(), 6);
        assert_eq!(p.label_space.len(), 6);
    }

    proptest! {
        #[test]
        fn ce_gradient_is_softmax_minus_onehot(
            logits in prop::collection::vec(-5.0f64..5.0, 7),
            t in 0usize..7,
            w in 0.1f64..3.0,
        ) {
            let target = EmotionLabel::ALL[t];
            let weights = ClassWeights::new(BTreeMap::from([(target, w)])).unwrap();
            let logits = Array1::from(logits);
            let (loss, g) = weighted_cross_entropy_grad(logits.view(), target, LabelSpace::All, &weights).unwrap();
            prop_assert!(loss > 0.0);
            for j in 0..7 {
                let eval = |d: f64| {
                    let mut l = logits.clone();
                    l[j] += d;
                    weighted_cross_entropy(l.view(), target, LabelSpace::All, &weights).unwrap()
                };
                let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                prop_assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1e-3));
            }
        }

        #[test]
        fn argmax_shift_invariant(logits in prop::collection::vec(-5.0f64..5.0, 7), c in -100.0f64..100.0) {
            let l = Array1::from(logits);
            prop_assert_eq!(argmax(l.view()), argmax((&l + c).view()));
        }
    }
}
