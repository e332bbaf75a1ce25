//! Confusion matrices, neutral-excluding F1, MCC and run aggregation.
//!
//! Rows of a confusion matrix are gold labels and columns are predictions.
//! Every score is a pure function of the matrix.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EmotionLabel;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{preds} predictions for {golds} gold labels")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("label `{0}` is not in the matrix's label space")]
    UnknownLabel(String),
    #[error("label space has no neutral label")]
    NoNeutralInSpace,
    #[error("need at least one report")]
    EmptySequence,
    #[error("counts must form a {0}x{0} matrix")]
    NotSquare(usize),
    #[error("unknown neutral policy `{0}`")]
    UnknownPolicy(String),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// A column of the confusion matrix: an emotion, or the reserved
/// non-matching label for unparsable generations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Emotion(EmotionLabel),
    Unparsable,
}

impl ClassLabel {
    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Emotion(e) => e.name(),
            ClassLabel::Unparsable => "unparsable",
        }
    }

    pub fn is_neutral(self) -> bool {
        self == ClassLabel::Emotion(EmotionLabel::Neutral)
    }

    pub fn is_emotional(self) -> bool {
        matches!(self, ClassLabel::Emotion(e) if e.is_emotional())
    }

    /// The seven emotion labels in id order.
    pub fn all_emotions() -> Vec<ClassLabel> {
        EmotionLabel::ALL.iter().map(|&e| e.into()).collect()
    }
}

impl From<EmotionLabel> for ClassLabel {
    fn from(e: EmotionLabel) -> Self {
        ClassLabel::Emotion(e)
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    labels: Vec<ClassLabel>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(labels: Vec<ClassLabel>) -> Self {
        let k = labels.len();
        Self {
            labels,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_counts(labels: Vec<ClassLabel>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = labels.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(MetricsError::NotSquare(k));
        }
        Ok(Self { labels, counts })
    }

    pub fn labels(&self) -> &[ClassLabel] {
        &self.labels
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: ClassLabel) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    pub fn get(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold][pred]
    }

    pub fn add(&mut self, gold: ClassLabel, pred: ClassLabel) -> Result<()> {
        let g = self
            .index_of(gold)
            .ok_or_else(|| MetricsError::UnknownLabel(gold.to_string()))?;
        let p = self
            .index_of(pred)
            .ok_or_else(|| MetricsError::UnknownLabel(pred.to_string()))?;
        self.counts[g][p] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.len()).map(|i| self.counts[i][i]).sum()
    }

    fn gold_total(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    fn pred_total(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }

    /// Same matrix with labels reordered by `order` (a permutation of
    /// indices), applied to rows and columns alike.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            labels: order.iter().map(|&i| self.labels[i]).collect(),
            counts: order
                .iter()
                .map(|&g| order.iter().map(|&p| self.counts[g][p]).collect())
                .collect(),
        }
    }
}

pub fn confusion<L: Into<ClassLabel> + Copy>(
    preds: &[L],
    golds: &[L],
    labels: &[ClassLabel],
) -> Result<ConfusionMatrix> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let mut m = ConfusionMatrix::zeros(labels.to_vec());
    for (&p, &g) in preds.iter().zip(golds) {
        m.add(g.into(), p.into())?;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum F1Mode {
    Micro,
    Macro,
}

/// How gold-neutral utterances enter the neutral-excluding F1 scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeutralPolicy {
    /// Predicting an emotion for a gold-neutral utterance is a false
    /// positive of that emotion.
    #[default]
    Attribute,
    /// Gold-neutral utterances are ignored.
    Drop,
}

impl FromStr for NeutralPolicy {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attribute" => Ok(NeutralPolicy::Attribute),
            "drop" => Ok(NeutralPolicy::Drop),
            other => Err(MetricsError::UnknownPolicy(other.into())),
        }
    }
}

impl fmt::Display for NeutralPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NeutralPolicy::Attribute => "attribute",
            NeutralPolicy::Drop => "drop",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct Counts {
    tp: u64,
    fp: u64,
    fn_: u64,
}

impl Counts {
    fn f1(self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    fn precision(self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    fn recall(self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn label_counts(m: &ConfusionMatrix, k: usize, skip_row: Option<usize>) -> Counts {
    let mut c = Counts::default();
    for g in 0..m.len() {
        if Some(g) == skip_row {
            continue;
        }
        for p in 0..m.len() {
            let n = m.counts[g][p];
            match (g == k, p == k) {
                (true, true) => c.tp += n,
                (false, true) => c.fp += n,
                (true, false) => c.fn_ += n,
                (false, false) => {}
            }
        }
    }
    c
}

fn f1_over(m: &ConfusionMatrix, scored: &[usize], skip_row: Option<usize>, mode: F1Mode) -> f64 {
    let per: Vec<Counts> = scored.iter().map(|&k| label_counts(m, k, skip_row)).collect();
    match mode {
        F1Mode::Macro if per.is_empty() => 0.0,
        F1Mode::Macro => per.iter().map(|c| c.f1()).sum::<f64>() / per.len() as f64,
        F1Mode::Micro => per
            .iter()
            .fold(Counts::default(), |a, c| Counts {
                tp: a.tp + c.tp,
                fp: a.fp + c.fp,
                fn_: a.fn_ + c.fn_,
            })
            .f1(),
    }
}

fn emotional_indices(m: &ConfusionMatrix) -> Vec<usize> {
    (0..m.len()).filter(|&k| m.labels[k].is_emotional()).collect()
}

/// F1 over the emotional labels, neutral errors attributed to the emotions
/// involved.
pub fn f1_excluding_neutral(m: &ConfusionMatrix, mode: F1Mode) -> Result<f64> {
    f1_star(m, mode, NeutralPolicy::Attribute)
}

pub fn f1_star(m: &ConfusionMatrix, mode: F1Mode, policy: NeutralPolicy) -> Result<f64> {
    let neutral = m
        .index_of(EmotionLabel::Neutral.into())
        .ok_or(MetricsError::NoNeutralInSpace)?;
    let skip = (policy == NeutralPolicy::Drop).then_some(neutral);
    Ok(f1_over(m, &emotional_indices(m), skip, mode))
}

/// F1 over every emotion label including neutral. Diagnostic only.
pub fn f1_including_neutral(m: &ConfusionMatrix, mode: F1Mode) -> f64 {
    let scored: Vec<usize> = (0..m.len())
        .filter(|&k| matches!(m.labels[k], ClassLabel::Emotion(_)))
        .collect();
    f1_over(m, &scored, None, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl BinaryCounts {
    pub fn n(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// `(TP/N - S*P) / sqrt(P*S*(1-S)*(1-P))` with `S = (TP+FN)/N` and
/// `P = (TP+FP)/N`; 0 when the denominator vanishes.
pub fn mcc_binary(c: BinaryCounts) -> f64 {
    let n = c.n();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let s = (c.tp + c.fn_) as f64 / n;
    let p = (c.tp + c.fp) as f64 / n;
    let denom = (p * s * (1.0 - s) * (1.0 - p)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        ((c.tp as f64 / n - s * p) / denom).clamp(-1.0, 1.0)
    }
}

/// K-class correlation over all labels of the matrix.
pub fn mcc_multiclass(m: &ConfusionMatrix) -> f64 {
    let s = m.total() as f64;
    let c = m.correct() as f64;
    let (mut sum_pt, mut sum_p2, mut sum_t2) = (0.0, 0.0, 0.0);
    for k in 0..m.len() {
        let t = m.gold_total(k) as f64;
        let p = m.pred_total(k) as f64;
        sum_pt += p * t;
        sum_p2 += p * p;
        sum_t2 += t * t;
    }
    let a = s * s - sum_p2;
    let b = s * s - sum_t2;
    if a <= 0.0 || b <= 0.0 {
        0.0
    } else {
        ((c * s - sum_pt) / (a.sqrt() * b.sqrt())).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Per-label precision, recall and F1 for every row/column of the matrix.
pub fn per_label_scores(m: &ConfusionMatrix) -> Vec<LabelScore> {
    (0..m.len())
        .map(|k| {
            let c = label_counts(m, k, None);
            LabelScore {
                label: m.labels[k].to_string(),
                precision: c.precision(),
                recall: c.recall(),
                f1: c.f1(),
                support: m.gold_total(k),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportOptions {
    pub neutral_policy: NeutralPolicy,
    pub include_neutral: bool,
    pub population: String,
    pub seed: Option<u64>,
    pub config_echo: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub macro_f1_star: f64,
    pub micro_f1_star: f64,
    pub mcc: f64,
    pub per_label: Vec<LabelScore>,
    pub labels: Vec<String>,
    pub confusion: Vec<Vec<u64>>,
    pub n_scored: u64,
    pub population: String,
    pub neutral_policy: NeutralPolicy,
    pub include_neutral: bool,
    /// False when the F1 fields include neutral and so differ from the
    /// published convention.
    pub comparable: bool,
    pub seed: Option<u64>,
    pub config_echo: serde_json::Value,
}

impl MetricsReport {
    pub fn from_confusion(m: &ConfusionMatrix, opts: &ReportOptions) -> Result<Self> {
        let (macro_f1, micro_f1) = if opts.include_neutral {
            (
                f1_including_neutral(m, F1Mode::Macro),
                f1_including_neutral(m, F1Mode::Micro),
            )
        } else {
            (
                f1_star(m, F1Mode::Macro, opts.neutral_policy)?,
                f1_star(m, F1Mode::Micro, opts.neutral_policy)?,
            )
        };
        Ok(Self {
            macro_f1_star: macro_f1,
            micro_f1_star: micro_f1,
            mcc: mcc_multiclass(m),
            per_label: per_label_scores(m),
            labels: m.labels.iter().map(|l| l.to_string()).collect(),
            confusion: m.counts.clone(),
            n_scored: m.total(),
            population: opts.population.clone(),
            neutral_policy: opts.neutral_policy,
            include_neutral: opts.include_neutral,
            comparable: !opts.include_neutral,
            seed: opts.seed,
            config_echo: opts.config_echo.clone(),
        })
    }

    /// Percentages with two decimals for F1, two decimals for MCC.
    pub fn summary_line(&self) -> String {
        format!(
            "macroF1*={:.2} microF1*={:.2} MCC={:.2} n={}",
            100.0 * self.macro_f1_star,
            100.0 * self.micro_f1_star,
            self.mcc,
            self.n_scored
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(MetricsError::EmptySequence);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_runs: usize,
    pub macro_f1_star: MeanStd,
    pub micro_f1_star: MeanStd,
    pub mcc: MeanStd,
}

pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<RunSummary> {
    let col = |f: fn(&MetricsReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(RunSummary {
        n_runs: reports.len(),
        macro_f1_star: col(|r| r.macro_f1_star)?,
        micro_f1_star: col(|r| r.micro_f1_star)?,
        mcc: col(|r| r.mcc)?,
    })
}
