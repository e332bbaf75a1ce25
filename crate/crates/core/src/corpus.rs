//! DailyDialog-format corpus handling.
//!
//! A split lives in two parallel files: `dialogues_<split>.txt`, one dialog per
//! line with utterances terminated by `__eou__`, and
//! `dialogues_emotion_<split>.txt`, one line of space-separated label ids per
//! dialog.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// End-of-utterance delimiter used by the dataset files.
pub const EOU: &str = "__eou__";

/// Dialogs longer than this trigger a warning (largest dialog in the real data).
pub const MAX_EXPECTED_DIALOG_LEN: usize = 35;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("dialog {id}: {segments} utterances but {labels} labels")]
    CountMismatch {
        id: String,
        segments: usize,
        labels: usize,
    },
    #[error("dialog {id}: bad label `{token}`")]
    BadLabel { id: String, token: String },
    #[error("dialog {id}: utterance {index} is empty")]
    EmptyUtterance { id: String, index: usize },
    #[error("dialog {id} has no utterances")]
    EmptyDialog { id: String },
    #[error("utterance text may not contain `{EOU}` or line breaks")]
    InvalidText,
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{text_lines} dialog lines but {label_lines} label lines")]
    LineCountMismatch {
        text_lines: usize,
        label_lines: usize,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("label {0} never occurs")]
    ZeroCount(String),
    #[error("unknown split `{0}`")]
    UnknownSplit(String),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// The seven DailyDialog labels, with the dataset's integer ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Neutral = 0,
    Anger = 1,
    Disgust = 2,
    Fear = 3,
    Happiness = 4,
    Sadness = 5,
    Surprise = 6,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 7] = [
        EmotionLabel::Neutral,
        EmotionLabel::Anger,
        EmotionLabel::Disgust,
        EmotionLabel::Fear,
        EmotionLabel::Happiness,
        EmotionLabel::Sadness,
        EmotionLabel::Surprise,
    ];

    pub const EMOTIONS: [EmotionLabel; 6] = [
        EmotionLabel::Anger,
        EmotionLabel::Disgust,
        EmotionLabel::Fear,
        EmotionLabel::Happiness,
        EmotionLabel::Sadness,
        EmotionLabel::Surprise,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::Anger => "anger",
            EmotionLabel::Disgust => "disgust",
            EmotionLabel::Fear => "fear",
            EmotionLabel::Happiness => "happiness",
            EmotionLabel::Sadness => "sadness",
            EmotionLabel::Surprise => "surprise",
        }
    }

    pub fn is_emotional(self) -> bool {
        self != EmotionLabel::Neutral
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| CorpusError::UnknownLabel(s.to_string()))
    }
}

/// Which labels a model predicts: all seven, or the six emotions only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LabelSpace {
    #[default]
    #[serde(rename = "7")]
    All,
    #[serde(rename = "6")]
    EmotionsOnly,
}

impl LabelSpace {
    pub fn labels(self) -> &'static [EmotionLabel] {
        match self {
            LabelSpace::All => &EmotionLabel::ALL,
            LabelSpace::EmotionsOnly => &EmotionLabel::EMOTIONS,
        }
    }

    pub fn len(self) -> usize {
        self.labels().len()
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn index_of(self, label: EmotionLabel) -> Option<usize> {
        self.labels().iter().position(|&l| l == label)
    }

    pub fn contains(self, label: EmotionLabel) -> bool {
        self.index_of(label).is_some()
    }

    pub fn from_size(k: usize) -> Option<Self> {
        match k {
            7 => Some(LabelSpace::All),
            6 => Some(LabelSpace::EmotionsOnly),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "valid" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(CorpusError::UnknownSplit(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub index: usize,
    pub text: String,
    pub label: EmotionLabel,
}

impl Utterance {
    /// Builds an utterance, trimming the text. Text that could not survive a
    /// trip through the line format is rejected.
    pub fn new(index: usize, text: &str, label: EmotionLabel) -> Result<Self> {
        let text = text.trim();
        if text.contains(EOU) || text.contains(['\n', '\r']) {
            return Err(CorpusError::InvalidText);
        }
        if text.is_empty() {
            return Err(CorpusError::EmptyUtterance {
                id: String::new(),
                index,
            });
        }
        Ok(Self {
            index,
            text: text.to_string(),
            label,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Dialog {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = EmotionLabel> + '_ {
        self.utterances.iter().map(|u| u.label)
    }

    pub fn last(&self) -> Option<&Utterance> {
        self.utterances.last()
    }

    /// Renders the dialog back to its (text line, label line) pair.
    pub fn to_lines(&self) -> (String, String) {
        let mut text = String::new();
        for u in &self.utterances {
            text.push_str(&u.text);
            text.push(' ');
            text.push_str(EOU);
            text.push(' ');
        }
        let labels = self
            .utterances
            .iter()
            .map(|u| u.label.id().to_string())
            .collect::<Vec<_>>()
            .join(" ");
        (text.trim_end().to_string(), labels)
    }
}

/// Per-label utterance counts; always carries all seven labels.
pub type LabelHistogram = BTreeMap<EmotionLabel, usize>;

fn empty_histogram() -> LabelHistogram {
    EmotionLabel::ALL.iter().map(|&l| (l, 0)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub split: Split,
    pub dialogs: Vec<Dialog>,
    pub label_histogram: LabelHistogram,
}

impl Corpus {
    pub fn new(split: Split, dialogs: Vec<Dialog>) -> Self {
        let mut label_histogram = empty_histogram();
        for label in dialogs.iter().flat_map(|d| d.labels()) {
            *label_histogram.entry(label).or_default() += 1;
        }
        Self {
            split,
            dialogs,
            label_histogram,
        }
    }

    pub fn n_utterances(&self) -> usize {
        self.dialogs.iter().map(Dialog::len).sum()
    }

    /// Restricts the corpus to its first `n` dialogs.
    pub fn truncated(&self, n: usize) -> Self {
        Self::new(self.split, self.dialogs.iter().take(n).cloned().collect())
    }

    pub fn write_to(&self, mut text: impl Write, mut labels: impl Write) -> Result<()> {
        for dialog in &self.dialogs {
            let (t, l) = dialog.to_lines();
            writeln!(text, "{t}")?;
            writeln!(labels, "{l}")?;
        }
        Ok(())
    }

    /// Writes the split into `dir` using the dataset's file names.
    pub fn write_split(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let (text_path, label_path) = split_file_names(dir, self.split);
        let text = std::io::BufWriter::new(File::create(text_path)?);
        let labels = std::io::BufWriter::new(File::create(label_path)?);
        self.write_to(text, labels)
    }
}

/// Parses one dialog from its text line and label line.
pub fn parse_dialog_line(text_line: &str, label_line: &str, id: &str) -> Result<Dialog> {
    let mut segments: Vec<&str> = text_line.split(EOU).collect();
    if segments.len() > 1 && segments.last().is_some_and(|s| s.trim().is_empty()) {
        segments.pop();
    }
    let labels = label_line
        .split_whitespace()
        .map(|tok| {
            tok.parse::<u8>()
                .ok()
                .and_then(EmotionLabel::from_id)
                .ok_or_else(|| CorpusError::BadLabel {
                    id: id.to_string(),
                    token: tok.to_string(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    if segments.len() == 1 && segments[0].trim().is_empty() && labels.is_empty() {
        return Err(CorpusError::EmptyDialog { id: id.to_string() });
    }
    if segments.len() != labels.len() {
        return Err(CorpusError::CountMismatch {
            id: id.to_string(),
            segments: segments.len(),
            labels: labels.len(),
        });
    }
    let utterances = segments
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(index, (text, label))| {
            Utterance::new(index, text, label).map_err(|e| match e {
                CorpusError::EmptyUtterance { index, .. } => CorpusError::EmptyUtterance {
                    id: id.to_string(),
                    index,
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if utterances.len() > MAX_EXPECTED_DIALOG_LEN {
        log::warn!(
            "dialog {id} has {} utterances (more than {MAX_EXPECTED_DIALOG_LEN})",
            utterances.len()
        );
    }
    Ok(Dialog {
        id: id.to_string(),
        utterances,
    })
}

/// Reads a split from two line-parallel readers.
pub fn read_split(text: impl BufRead, labels: impl BufRead, split: Split) -> Result<Corpus> {
    let text_lines = text.lines().collect::<std::io::Result<Vec<_>>>()?;
    let label_lines = labels.lines().collect::<std::io::Result<Vec<_>>>()?;
    if text_lines.len() != label_lines.len() {
        return Err(CorpusError::LineCountMismatch {
            text_lines: text_lines.len(),
            label_lines: label_lines.len(),
        });
    }
    let dialogs = text_lines
        .iter()
        .zip(&label_lines)
        .enumerate()
        .map(|(i, (t, l))| parse_dialog_line(t, l, &format!("{split}:{i}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus::new(split, dialogs))
}

fn split_file_names(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("dialogues_{split}.txt")),
        dir.join(format!("dialogues_emotion_{split}.txt")),
    )
}

/// Loads a split from `dir`, accepting either the flat layout or the
/// official archive layout with one sub-directory per split.
pub fn load_split(dir: &Path, split: Split) -> Result<Corpus> {
    let nested = dir.join(split.name());
    let base = if split_file_names(&nested, split).0.exists() {
        nested
    } else {
        dir.to_path_buf()
    };
    let (text_path, label_path) = split_file_names(&base, split);
    for p in [&text_path, &label_path] {
        if !p.exists() {
            return Err(CorpusError::MissingFile(p.clone()));
        }
    }
    read_split(
        BufReader::new(File::open(&text_path)?),
        BufReader::new(File::open(&label_path)?),
        split,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_dialogs: usize,
    pub n_utterances: usize,
    pub max_utt_per_dialog: usize,
    pub mean_utt_per_dialog: f64,
    pub mean_utt_per_dialog_rounded: u64,
    pub label_histogram: LabelHistogram,
}

impl CorpusStats {
    /// Key/value rendering used by the `stats` subcommand.
    pub fn to_report(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("n_dialogs = {}\n", self.n_dialogs));
        out.push_str(&format!("n_utterances = {}\n", self.n_utterances));
        out.push_str(&format!("max_utt_per_dialog = {}\n", self.max_utt_per_dialog));
        out.push_str(&format!(
            "mean_utt_per_dialog = {:.2}\n",
            self.mean_utt_per_dialog
        ));
        out.push_str(&format!(
            "mean_utt_per_dialog_rounded = {}\n",
            self.mean_utt_per_dialog_rounded
        ));
        out.push_str("\n[label_histogram]\n");
        for (label, count) in &self.label_histogram {
            out.push_str(&format!("{label} = {count}\n"));
        }
        out
    }
}

pub fn corpus_stats(corpus: &Corpus) -> Result<CorpusStats> {
    dialog_stats(&corpus.dialogs)
}

/// Statistics over several splits at once.
pub fn combined_stats(corpora: &[Corpus]) -> Result<CorpusStats> {
    let dialogs: Vec<Dialog> = corpora.iter().flat_map(|c| c.dialogs.clone()).collect();
    dialog_stats(&dialogs)
}

fn dialog_stats(dialogs: &[Dialog]) -> Result<CorpusStats> {
    if dialogs.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut label_histogram = empty_histogram();
    for label in dialogs.iter().flat_map(|d| d.labels()) {
        *label_histogram.entry(label).or_default() += 1;
    }
    let n_utterances: usize = dialogs.iter().map(Dialog::len).sum();
    let mean = n_utterances as f64 / dialogs.len() as f64;
    Ok(CorpusStats {
        n_dialogs: dialogs.len(),
        n_utterances,
        max_utt_per_dialog: dialogs.iter().map(Dialog::len).max().unwrap_or(0),
        mean_utt_per_dialog: mean,
        mean_utt_per_dialog_rounded: mean.round() as u64,
        label_histogram,
    })
}

/// Normalized inverse-frequency weights over the keys of `counts`.
///
/// With `smoothing = Some(k)`, `k` is added to every count first so that
/// absent classes stay well defined.
pub fn inverse_frequency_weights<K: Ord + Clone + fmt::Display>(
    counts: &BTreeMap<K, usize>,
    smoothing: Option<f64>,
) -> Result<BTreeMap<K, f64>> {
    let smooth = smoothing.unwrap_or(0.0);
    let mut raw = BTreeMap::new();
    for (key, &count) in counts {
        let c = count as f64 + smooth;
        if c <= 0.0 {
            return Err(CorpusError::ZeroCount(key.to_string()));
        }
        raw.insert(key.clone(), 1.0 / c);
    }
    let total: f64 = raw.values().sum();
    Ok(raw.into_iter().map(|(k, w)| (k, w / total)).collect())
}

/// Inverse label-frequency weights for the sampler.
pub fn label_weights(
    corpus: &Corpus,
    include_neutral: bool,
    smoothing: Option<f64>,
) -> Result<BTreeMap<EmotionLabel, f64>> {
    let counts: BTreeMap<EmotionLabel, usize> = corpus
        .label_histogram
        .iter()
        .filter(|(l, _)| include_neutral || l.is_emotional())
        .map(|(&l, &c)| (l, c))
        .collect();
    inverse_frequency_weights(&counts, smoothing)
}
