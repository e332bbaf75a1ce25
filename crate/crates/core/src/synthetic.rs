//! Synthetic corpora with controllable label imbalance.
//!
//! Each label gets a random prototype direction; an utterance embedding is its
//! label's prototype plus isotropic Gaussian noise. Texts are opaque ids, so
//! the generated store is the only signal.

use std::collections::BTreeMap;

use ndarray::Array1;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Dialog, EmotionLabel, Split, Utterance};
use crate::embedding::{utterance_key, SentenceEmbeddingStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub train_dialogs: usize,
    pub test_dialogs: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub dim: usize,
    /// Label drawn with probability `majority_share`.
    pub majority: EmotionLabel,
    pub majority_share: f64,
    /// Remaining labels, drawn uniformly.
    pub minority: Vec<EmotionLabel>,
    /// Per-coordinate noise standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_dialogs: 150,
            test_dialogs: 150,
            min_len: 3,
            max_len: 8,
            dim: 16,
            majority: EmotionLabel::Neutral,
            majority_share: 0.95,
            minority: EmotionLabel::EMOTIONS.to_vec(),
            noise: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Corpus,
    pub test: Corpus,
    pub store: SentenceEmbeddingStore,
}

fn prototypes(dim: usize, rng: &mut ChaCha8Rng) -> BTreeMap<EmotionLabel, Array1<f64>> {
    EmotionLabel::ALL
        .iter()
        .map(|&l| {
            let v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.dot(&v).sqrt();
            (l, v / norm)
        })
        .collect()
}

struct Generator<'a> {
    cfg: &'a SyntheticConfig,
    labels: Vec<EmotionLabel>,
    label_dist: WeightedIndex<f64>,
    protos: BTreeMap<EmotionLabel, Array1<f64>>,
    rng: ChaCha8Rng,
    entries: Vec<(String, Array1<f64>)>,
}

impl Generator<'_> {
    fn split(&mut self, split: Split, n_dialogs: usize) -> Corpus {
        let cfg = self.cfg;
        let min_len = cfg.min_len.max(1);
        let mut dialogs = Vec::with_capacity(n_dialogs);
        for d in 0..n_dialogs {
            let id = format!("{}:{d}", split.name());
            let len = self.rng.random_range(min_len..=cfg.max_len.max(min_len));
            let mut utterances = Vec::with_capacity(len);
            for i in 0..len {
                let label = self.labels[self.label_dist.sample(&mut self.rng)];
                let text = format!("s{} d{d} u{i}", split.name());
                utterances.push(Utterance::new(i, &text, label).expect("generated text is valid"));
                let noise: Array1<f64> = (0..cfg.dim)
                    .map(|_| cfg.noise * self.rng.sample::<f64, _>(StandardNormal))
                    .collect();
                self.entries.push((utterance_key(&id, i), &self.protos[&label] + &noise));
            }
            dialogs.push(Dialog { id, utterances });
        }
        Corpus::new(split, dialogs)
    }
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticData {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos = prototypes(cfg.dim, &mut rng);
    let mut labels = vec![cfg.majority];
    let mut weights = vec![cfg.majority_share];
    let minority: Vec<EmotionLabel> = cfg.minority.iter().copied().filter(|&l| l != cfg.majority).collect();
    for &l in &minority {
        labels.push(l);
        weights.push((1.0 - cfg.majority_share) / minority.len().max(1) as f64);
    }
    let mut generator = Generator {
        cfg,
        labels,
        label_dist: WeightedIndex::new(&weights).expect("valid label distribution"),
        protos,
        rng,
        entries: Vec::new(),
    };
    let train = generator.split(Split::Train, cfg.train_dialogs);
    let test = generator.split(Split::Test, cfg.test_dialogs);
    let provider = format!("synthetic-{}-{}", cfg.dim, cfg.seed);
    let store = SentenceEmbeddingStore::from_entries(&provider, cfg.dim, generator.entries)
        .expect("generated entries are consistent");
    SyntheticData { train, test, store }
}

/// Small, nearly separable train corpus over all seven labels.
pub fn separable_fixture(n_dialogs: usize, dim: usize, seed: u64) -> (Corpus, SentenceEmbeddingStore) {
    let data = generate(&SyntheticConfig {
        train_dialogs: n_dialogs,
        test_dialogs: 0,
        dim,
        majority_share: 1.0 / 7.0,
        noise: 0.05,
        seed,
        ..SyntheticConfig::default()
    });
    (data.train, data.store)
}
