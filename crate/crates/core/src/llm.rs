//! Zero-shot evaluation of text-generation models.
//!
//! One prompt per dialog asks for the emotion of its last utterance. The
//! first emotion name found in the generated text is the prediction.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Corpus, Dialog, EmotionLabel, LabelSpace};
use crate::metrics::{ClassLabel, ConfusionMatrix, MetricsError, MetricsReport, NeutralPolicy, ReportOptions};

pub const PLACEHOLDERS: [&str; 3] = ["{dialog}", "{labels}", "{last_utterance}"];

pub const DEFAULT_PARALLELISM: usize = 4;

/// Modal share at or above which a generator is flagged as collapsed.
pub const DEFAULT_COLLAPSE_THRESHOLD: f64 = 0.8;

pub const BUILTIN_TEMPLATES: [&str; 2] = ["llama-style", "falcon-style"];

const LLAMA_STYLE: &str = include_str!("../templates/llama-style.txt");
const FALCON_STYLE: &str = include_str!("../templates/falcon-style.txt");

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("template `{name}` must contain {placeholder} exactly once (found {count})")]
    Placeholder {
        name: String,
        placeholder: &'static str,
        count: usize,
    },
    #[error("unknown built-in template `{0}`")]
    UnknownTemplate(String),
    #[error("dialog `{0}` has no utterances")]
    EmptyDialog(String),
    #[error("replay fixture line {line}: {reason}")]
    Replay { line: usize, reason: String },
    #[error("unknown unparsable policy `{0}`")]
    UnknownPolicy(String),
    #[error("parallelism must be at least 1")]
    ZeroParallelism,
    #[error("http client: {0}")]
    Client(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = LlmError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    text: String,
}

impl PromptTemplate {
    pub fn new(name: &str, text: &str) -> Result<Self> {
        for placeholder in PLACEHOLDERS {
            let count = text.matches(placeholder).count();
            if count != 1 {
                return Err(LlmError::Placeholder {
                    name: name.to_string(),
                    placeholder,
                    count,
                });
            }
        }
        Ok(Self {
            name: name.to_string(),
            text: text.to_string(),
        })
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "llama-style" => Self::new(name, LLAMA_STYLE),
            "falcon-style" => Self::new(name, FALCON_STYLE),
            other => Err(LlmError::UnknownTemplate(other.to_string())),
        }
    }

    /// A built-in name, or else a path to a template file named after its
    /// file stem.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if BUILTIN_TEMPLATES.contains(&name_or_path) {
            return Self::builtin(name_or_path);
        }
        Self::load(Path::new(name_or_path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "template".to_string());
        Self::new(&name, &text)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

fn render_dialog(dialog: &Dialog) -> String {
    dialog
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| format!("{}: {}", if i % 2 == 0 { 'A' } else { 'B' }, u.text))
        .collect::<Vec<_>>()
        .join("\n")
}

fn label_list() -> String {
    EmotionLabel::ALL.iter().map(|l| l.name()).collect::<Vec<_>>().join(", ")
}

/// Fills the template in a single left-to-right pass, so placeholder-like
/// text inside utterances is left alone.
pub fn build_prompt(dialog: &Dialog, template: &PromptTemplate) -> Result<String> {
    let last = dialog.last().ok_or_else(|| LlmError::EmptyDialog(dialog.id.clone()))?;
    let values = [render_dialog(dialog), label_list(), last.text.clone()];
    let mut out = String::with_capacity(template.text.len() + values.iter().map(String::len).sum::<usize>());
    let mut rest = template.text.as_str();
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        rest = &rest[pos..];
        match PLACEHOLDERS.iter().position(|p| rest.starts_with(p)) {
            Some(k) => {
                out.push_str(&values[k]);
                rest = &rest[PLACEHOLDERS[k].len()..];
            }
            None => {
                out.push('{');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// The earliest label name mentioned in `generated`, ignoring case.
pub fn parse_label(generated: &str, space: LabelSpace) -> ClassLabel {
    let lowered = generated.to_lowercase();
    space
        .labels()
        .iter()
        .filter_map(|&l| lowered.find(l.name()).map(|offset| (offset, l.id(), l)))
        .min()
        .map_or(ClassLabel::Unparsable, |(_, _, l)| l.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnparsablePolicy {
    #[default]
    CountAsWrong,
    MapToNeutral,
}

impl FromStr for UnparsablePolicy {
    type Err = LlmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "count-as-wrong" => Ok(Self::CountAsWrong),
            "map-to-neutral" => Ok(Self::MapToNeutral),
            other => Err(LlmError::UnknownPolicy(other.to_string())),
        }
    }
}

impl fmt::Display for UnparsablePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CountAsWrong => "count-as-wrong",
            Self::MapToNeutral => "map-to-neutral",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("generation failed after {attempts} attempt(s): {message}")]
pub struct GenerationFailure {
    pub attempts: u32,
    pub message: String,
}

/// A text-generation backend. `key` identifies the dialog; live endpoints
/// ignore it, replay fixtures are indexed by it.
pub trait GenerationClient: Sync {
    fn generate(&self, key: &str, prompt: &str) -> Result<String, GenerationFailure>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpClientConfig {
    pub endpoint: String,
    pub max_new_tokens: u32,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl Default for HttpClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/generate".to_string(),
            max_new_tokens: 16,
            timeout_secs: 120,
            max_retries: 2,
        }
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    max_new_tokens: u32,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

/// Client for the `{"prompt", "max_new_tokens"} -> {"text"}` JSON contract.
#[derive(Debug, Clone)]
pub struct HttpClient {
    config: HttpClientConfig,
    client: reqwest::blocking::Client,
}

impl HttpClient {
    pub fn new(config: HttpClientConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Client(e.to_string()))?;
        Ok(Self { config, client })
    }

    fn attempt(&self, prompt: &str) -> std::result::Result<String, String> {
        let response = self
            .client
            .post(&self.config.endpoint)
            .json(&GenerateRequest {
                prompt,
                max_new_tokens: self.config.max_new_tokens,
            })
            .send()
            .map_err(|e| e.to_string())?;
        let status = response.status();
        if !status.is_success() {
            return Err(format!("endpoint returned {status}"));
        }
        response
            .json::<GenerateResponse>()
            .map(|r| r.text)
            .map_err(|e| format!("bad response body: {e}"))
    }
}

impl GenerationClient for HttpClient {
    fn generate(&self, key: &str, prompt: &str) -> Result<String, GenerationFailure> {
        let attempts = self.config.max_retries + 1;
        let mut message = String::new();
        for attempt in 1..=attempts {
            match self.attempt(prompt) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    warn!("{key}: attempt {attempt}/{attempts} failed: {e}");
                    message = e;
                }
            }
            if attempt < attempts {
                std::thread::sleep(Duration::from_millis(200 * u64::from(attempt)));
            }
        }
        Err(GenerationFailure { attempts, message })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReplayRecord {
    key: String,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    error: Option<String>,
}

/// Canned responses from a JSON-lines fixture of `{"key", "text"}` or
/// `{"key", "error"}` records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayClient {
    responses: BTreeMap<String, std::result::Result<String, String>>,
}

impl ReplayClient {
    pub fn read(reader: impl BufRead) -> Result<Self> {
        let mut responses = BTreeMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let record: ReplayRecord = serde_json::from_str(&line).map_err(|e| LlmError::Replay {
                line: lineno,
                reason: e.to_string(),
            })?;
            let response = match (record.text, record.error) {
                (Some(text), None) => Ok(text),
                (None, Some(error)) => Err(error),
                _ => {
                    return Err(LlmError::Replay {
                        line: lineno,
                        reason: "expected exactly one of `text` and `error`".into(),
                    })
                }
            };
            if responses.insert(record.key.clone(), response).is_some() {
                return Err(LlmError::Replay {
                    line: lineno,
                    reason: format!("duplicate key `{}`", record.key),
                });
            }
        }
        Ok(Self { responses })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn insert(&mut self, key: &str, response: std::result::Result<String, String>) {
        self.responses.insert(key.to_string(), response);
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl GenerationClient for ReplayClient {
    fn generate(&self, key: &str, _prompt: &str) -> Result<String, GenerationFailure> {
        match self.responses.get(key) {
            Some(Ok(text)) => Ok(text.clone()),
            Some(Err(message)) => Err(GenerationFailure {
                attempts: 1,
                message: message.clone(),
            }),
            None => Err(GenerationFailure {
                attempts: 1,
                message: format!("no replay response for `{key}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationStatus {
    Ok,
    Unparsable,
    Failed,
}

/// One line of the generation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub key: String,
    pub prompt_sha256: String,
    pub raw_output: Option<String>,
    pub parsed_label: Option<String>,
    pub gold_label: String,
    pub status: GenerationStatus,
    pub error: Option<String>,
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

pub fn write_log(records: &[GenerationRecord], mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r).expect("record serializes"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmEvalOptions {
    pub unparsable: UnparsablePolicy,
    pub parallelism: usize,
    pub collapse_threshold: f64,
    pub neutral_policy: NeutralPolicy,
    pub include_neutral: bool,
    pub seed: Option<u64>,
    pub config_echo: serde_json::Value,
}

impl Default for LlmEvalOptions {
    fn default() -> Self {
        Self {
            unparsable: UnparsablePolicy::default(),
            parallelism: DEFAULT_PARALLELISM,
            collapse_threshold: DEFAULT_COLLAPSE_THRESHOLD,
            neutral_policy: NeutralPolicy::default(),
            include_neutral: false,
            seed: None,
            config_echo: serde_json::Value::Null,
        }
    }
}

/// Share of the most frequent prediction among scored dialogs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalShare {
    pub label: Option<String>,
    pub share: f64,
    pub threshold: f64,
    pub collapsed: bool,
}

impl ModalShare {
    pub fn of(predictions: &[ClassLabel], threshold: f64) -> Self {
        let mut counts: BTreeMap<ClassLabel, usize> = BTreeMap::new();
        for &p in predictions {
            *counts.entry(p).or_default() += 1;
        }
        // ties go to the first label in column order
        let modal = counts.iter().fold(None, |best: Option<(ClassLabel, usize)>, (&l, &c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((l, c)),
        });
        match modal {
            None => Self {
                label: None,
                share: 0.0,
                threshold,
                collapsed: false,
            },
            Some((label, count)) => {
                let share = count as f64 / predictions.len() as f64;
                Self {
                    label: Some(label.to_string()),
                    share,
                    threshold,
                    collapsed: share >= threshold,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmEvaluation {
    pub template: String,
    pub unparsable_policy: UnparsablePolicy,
    pub n_requested: usize,
    pub n_failed: usize,
    pub n_unparsable: usize,
    pub modal: ModalShare,
    pub metrics: MetricsReport,
    #[serde(skip)]
    pub log: Vec<GenerationRecord>,
}

/// Columns of an LLM confusion matrix: the seven emotions, then the
/// reserved column for unparsable output.
pub fn llm_labels() -> Vec<ClassLabel> {
    let mut labels = ClassLabel::all_emotions();
    labels.push(ClassLabel::Unparsable);
    labels
}

fn generate_one(client: &dyn GenerationClient, dialog: &Dialog, template: &PromptTemplate) -> Result<GenerationRecord> {
    let prompt = build_prompt(dialog, template)?;
    let gold = dialog.last().expect("prompt built, dialog non-empty").label;
    let mut record = GenerationRecord {
        key: dialog.id.clone(),
        prompt_sha256: prompt_hash(&prompt),
        raw_output: None,
        parsed_label: None,
        gold_label: gold.name().to_string(),
        status: GenerationStatus::Failed,
        error: None,
    };
    match client.generate(&dialog.id, &prompt) {
        Ok(text) => {
            let parsed = parse_label(&text, LabelSpace::All);
            record.status = if parsed == ClassLabel::Unparsable {
                GenerationStatus::Unparsable
            } else {
                GenerationStatus::Ok
            };
            record.parsed_label = Some(parsed.to_string());
            record.raw_output = Some(text);
        }
        Err(failure) => {
            debug!("{}: {failure}", dialog.id);
            record.error = Some(failure.to_string());
        }
    }
    Ok(record)
}

/// Sends one prompt per dialog and scores the parsed answers against the
/// last utterance's gold label. Requests run on at most
/// `opts.parallelism` threads; the log and the scores follow corpus order.
/// Failed generations are logged and left out of the scored population.
pub fn evaluate_llm(
    client: &dyn GenerationClient,
    corpus: &Corpus,
    template: &PromptTemplate,
    opts: &LlmEvalOptions,
) -> Result<LlmEvaluation> {
    if opts.parallelism == 0 {
        return Err(LlmError::ZeroParallelism);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallelism)
        .build()
        .map_err(|e| LlmError::Client(e.to_string()))?;
    let log: Vec<GenerationRecord> = pool.install(|| {
        corpus
            .dialogs
            .par_iter()
            .map(|d| generate_one(client, d, template))
            .collect::<Result<_>>()
    })?;

    let mut matrix = ConfusionMatrix::zeros(llm_labels());
    let mut predictions = Vec::new();
    for (record, dialog) in log.iter().zip(&corpus.dialogs) {
        let gold: ClassLabel = dialog.last().expect("non-empty").label.into();
        let pred = match record.status {
            GenerationStatus::Failed => continue,
            GenerationStatus::Ok => parse_label(record.raw_output.as_deref().unwrap_or(""), LabelSpace::All),
            GenerationStatus::Unparsable => match opts.unparsable {
                UnparsablePolicy::CountAsWrong => ClassLabel::Unparsable,
                UnparsablePolicy::MapToNeutral => EmotionLabel::Neutral.into(),
            },
        };
        matrix.add(gold, pred)?;
        predictions.push(pred);
    }
    let metrics = MetricsReport::from_confusion(
        &matrix,
        &ReportOptions {
            neutral_policy: opts.neutral_policy,
            include_neutral: opts.include_neutral,
            population: "last-utterance".to_string(),
            seed: opts.seed,
            config_echo: opts.config_echo.clone(),
        },
    )?;
    let count = |s: GenerationStatus| log.iter().filter(|r| r.status == s).count();
    Ok(LlmEvaluation {
        template: template.name().to_string(),
        unparsable_policy: opts.unparsable,
        n_requested: corpus.dialogs.len(),
        n_failed: count(GenerationStatus::Failed),
        n_unparsable: count(GenerationStatus::Unparsable),
        modal: ModalShare::of(&predictions, opts.collapse_threshold),
        metrics,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Split, Utterance};
    use crate::metrics::F1Mode;
    use proptest::prelude::*;
    use std::io::Read;
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::{Arc, Mutex};
    use EmotionLabel::*;

    fn dialog(id: &str, turns: &[(&str, EmotionLabel)]) -> Dialog {
        Dialog {
            id: id.to_string(),
            utterances: turns
                .iter()
                .enumerate()
                .map(|(i, (t, l))| Utterance::new(i, t, *l).unwrap())
                .collect(),
        }
    }

    fn simple_template() -> PromptTemplate {
        PromptTemplate::new("t", "{dialog}|{labels}|{last_utterance}").unwrap()
    }

    #[test]
    fn templates_need_each_placeholder_once() {
        assert!(PromptTemplate::new("ok", "{dialog} {labels} {last_utterance}").is_ok());
        for bad in ["{dialog} {labels}", "{dialog} {dialog} {labels} {last_utterance}", ""] {
            assert!(matches!(PromptTemplate::new("bad", bad), Err(LlmError::Placeholder { .. })));
        }
        for name in BUILTIN_TEMPLATES {
            assert_eq!(PromptTemplate::builtin(name).unwrap().name(), name);
        }
        assert!(matches!(PromptTemplate::builtin("gpt"), Err(LlmError::UnknownTemplate(_))));
    }

    #[test]
    fn prompt_contains_dialog_and_labels() {
        let d = dialog("x", &[("Hello there .", Neutral), ("Go away !", Anger)]);
        let p = build_prompt(&d, &simple_template()).unwrap();
        assert_eq!(
            p,
            "A: Hello there .\nB: Go away !|neutral, anger, disgust, fear, happiness, sadness, surprise|Go away !"
        );
        for l in EmotionLabel::ALL {
            assert!(p.contains(l.name()));
        }
    }

    #[test]
    fn single_utterance_body_is_last_utterance() {
        let d = dialog("x", &[("Only me .", Neutral)]);
        let t = PromptTemplate::new("t", "{dialog}#{last_utterance}#{labels}").unwrap();
        let p = build_prompt(&d, &t).unwrap();
        let parts: Vec<&str> = p.split('#').collect();
        assert_eq!(parts[0].trim_start_matches("A: "), parts[1]);
    }

    #[test]
    fn placeholders_inside_utterances_are_not_expanded() {
        let d = dialog("x", &[("say {labels} and {dialog}", Neutral)]);
        let p = build_prompt(&d, &simple_template()).unwrap();
        assert!(p.starts_with("A: say {labels} and {dialog}|"));
        assert!(p.ends_with("|say {labels} and {dialog}"));
    }

    #[test]
    fn empty_dialog_is_an_error() {
        let d = Dialog {
            id: "e".into(),
            utterances: vec![],
        };
        assert!(matches!(build_prompt(&d, &simple_template()), Err(LlmError::EmptyDialog(_))));
    }

    #[test]
    fn parse_label_cases() {
        let all = LabelSpace::All;
        assert_eq!(parse_label("I think the emotion is sadness.", all), Sadness.into());
        assert_eq!(parse_label("Mostly happiness, with a hint of anger", all), Happiness.into());
        assert_eq!(parse_label("No idea.", all), ClassLabel::Unparsable);
        assert_eq!(parse_label("FEAR!", all), Fear.into());
        assert_eq!(parse_label("", all), ClassLabel::Unparsable);
        assert_eq!(parse_label("neutral", LabelSpace::EmotionsOnly), ClassLabel::Unparsable);
        // plain substring matching: label names inside other words count
        assert_eq!(parse_label("That sounds dangerous.", all), Anger.into());
    }

    #[test]
    fn http_request_rejects_unknown_response_shape() {
        assert!(serde_json::from_str::<GenerateResponse>(r#"{"generated": "x"}"#).is_err());
        let body = serde_json::to_string(&GenerateRequest {
            prompt: "p",
            max_new_tokens: 8,
        })
        .unwrap();
        assert_eq!(body, r#"{"prompt":"p","max_new_tokens":8}"#);
    }

    /// Serves `responses` in order, one connection each, recording request
    /// bodies.
    fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/generate", listener.local_addr().unwrap());
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let hits = Arc::new(AtomicUsize::new(0));
        let (b, h) = (bodies.clone(), hits.clone());
        std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((mut stream, _)) = listener.accept() else { return };
                h.fetch_add(1, Ordering::SeqCst);
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                loop {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf);
                    if let Some(end) = text.find("\r\n\r\n") {
                        let len = text[..end]
                            .lines()
                            .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                            .unwrap_or(0);
                        if buf.len() >= end + 4 + len {
                            b.lock().unwrap().push(String::from_utf8_lossy(&buf[end + 4..]).into_owned());
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (url, bodies, hits)
    }

    fn http(url: String, max_retries: u32) -> HttpClient {
        HttpClient::new(HttpClientConfig {
            endpoint: url,
            max_new_tokens: 5,
            timeout_secs: 5,
            max_retries,
        })
        .unwrap()
    }

    #[test]
    fn http_client_follows_contract() {
        let (url, bodies, _) = serve(vec![(200, r#"{"text":"sadness"}"#.into())]);
        assert_eq!(http(url, 0).generate("k", "hi").unwrap(), "sadness");
        assert_eq!(bodies.lock().unwrap()[0], r#"{"prompt":"hi","max_new_tokens":5}"#);
    }

    #[test]
    fn http_client_retries_within_bound() {
        let (url, _, hits) = serve(vec![
            (500, "{}".into()),
            (200, "not json".into()),
            (200, r#"{"text":"fear"}"#.into()),
        ]);
        assert_eq!(http(url, 2).generate("k", "p").unwrap(), "fear");
        assert_eq!(hits.load(Ordering::SeqCst), 3);

        let (url, _, hits) = serve(vec![(500, "{}".into()), (500, "{}".into()), (200, r#"{"text":"x"}"#.into())]);
        let err = http(url, 1).generate("k", "p").unwrap_err();
        assert_eq!(err.attempts, 2);
        assert_eq!(hits.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn replay_fixture_parsing() {
        let src = "{\"key\":\"a\",\"text\":\"joy\"}\n\n{\"key\":\"b\",\"error\":\"timeout\"}\n";
        let c = ReplayClient::read(src.as_bytes()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.generate("a", "").unwrap(), "joy");
        assert_eq!(c.generate("b", "").unwrap_err().message, "timeout");
        assert!(c.generate("c", "").is_err());
        for bad in [
            "{\"key\":\"a\"}",
            "{\"key\":\"a\",\"text\":\"x\",\"error\":\"y\"}",
            "{\"key\":\"a\",\"text\":\"x\"}\n{\"key\":\"a\",\"text\":\"y\"}",
            "not json",
        ] {
            assert!(matches!(ReplayClient::read(bad.as_bytes()), Err(LlmError::Replay { .. })), "{bad}");
        }
    }

    fn corpus() -> Corpus {
        let golds = [Anger, Happiness, Sadness, Neutral, Fear, Disgust, Surprise, Happiness];
        Corpus::new(
            Split::Test,
            golds
                .iter()
                .enumerate()
                .map(|(i, &g)| dialog(&format!("test:{i}"), &[("hi .", Neutral), ("well .", g)]))
                .collect(),
        )
    }

    fn replay(c: &Corpus, text: impl Fn(&Dialog) -> String) -> ReplayClient {
        let mut client = ReplayClient::default();
        for d in &c.dialogs {
            client.insert(&d.id, Ok(text(d)));
        }
        client
    }

    #[test]
    fn gold_echo_scores_perfectly() {
        let c = corpus();
        let client = replay(&c, |d| format!("The answer is {}.", d.last().unwrap().label));
        let r = evaluate_llm(&client, &c, &simple_template(), &LlmEvalOptions::default()).unwrap();
        assert_eq!(r.metrics.macro_f1_star, 1.0);
        assert_eq!(r.metrics.micro_f1_star, 1.0);
        assert_eq!(r.metrics.population, "last-utterance");
        assert_eq!(r.n_requested, 8);
        assert_eq!(r.metrics.n_scored, 8);
        assert!(!r.modal.collapsed);
        let keys: Vec<&str> = r.log.iter().map(|l| l.key.as_str()).collect();
        let expected: Vec<&str> = c.dialogs.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(keys, expected);
    }

    #[test]
    fn constant_generator_collapses() {
        let c = corpus();
        let client = replay(&c, |_| "happiness".to_string());
        let r = evaluate_llm(&client, &c, &simple_template(), &LlmEvalOptions::default()).unwrap();
        assert_eq!(r.modal.label.as_deref(), Some("happiness"));
        assert_eq!(r.modal.share, 1.0);
        assert!(r.modal.collapsed);
        assert_eq!(r.metrics.mcc, 0.0);
    }

    #[test]
    fn unparsable_policies() {
        let c = corpus();
        let client = replay(&c, |_| "I cannot tell.".to_string());
        let r = evaluate_llm(&client, &c, &simple_template(), &LlmEvalOptions::default()).unwrap();
        assert_eq!(r.n_unparsable, 8);
        assert_eq!(r.metrics.micro_f1_star, 0.0);
        assert_eq!(r.modal.label.as_deref(), Some("unparsable"));

        let opts = LlmEvalOptions {
            unparsable: UnparsablePolicy::MapToNeutral,
            ..LlmEvalOptions::default()
        };
        let r = evaluate_llm(&client, &c, &simple_template(), &opts).unwrap();
        assert_eq!(r.modal.label.as_deref(), Some("neutral"));
        // the one neutral-gold dialog is now correct
        let m = ConfusionMatrix::from_counts(llm_labels(), r.metrics.confusion.clone()).unwrap();
        assert_eq!(m.correct(), 1);
        assert_eq!(crate::metrics::f1_star(&m, F1Mode::Micro, NeutralPolicy::Attribute).unwrap(), 0.0);
    }

    #[test]
    fn failures_are_logged_and_excluded() {
        let c = corpus();
        let mut client = replay(&c, |d| d.last().unwrap().label.to_string());
        client.insert("test:1", Err("boom".into()));
        client.insert("test:4", Err("boom".into()));
        let r = evaluate_llm(&client, &c, &simple_template(), &LlmEvalOptions::default()).unwrap();
        assert_eq!(r.n_failed, 2);
        assert_eq!(r.metrics.n_scored as usize, r.n_requested - r.n_failed);
        assert_eq!(r.log[1].status, GenerationStatus::Failed);
        assert!(r.log[1].error.as_deref().unwrap().contains("boom"));
    }

    #[test]
    fn one_request_per_dialog() {
        struct Counting(AtomicUsize);
        impl GenerationClient for Counting {
            fn generate(&self, _: &str, _: &str) -> Result<String, GenerationFailure> {
                self.0.fetch_add(1, Ordering::SeqCst);
                Ok("surprise".into())
            }
        }
        let c = corpus();
        let client = Counting(AtomicUsize::new(0));
        for parallelism in [1, 3] {
            client.0.store(0, Ordering::SeqCst);
            let opts = LlmEvalOptions {
                parallelism,
                ..LlmEvalOptions::default()
            };
            evaluate_llm(&client, &c, &simple_template(), &opts).unwrap();
            assert_eq!(client.0.load(Ordering::SeqCst), c.dialogs.len());
        }
    }

    #[test]
    fn log_round_trips() {
        let c = corpus();
        let client = replay(&c, |_| "sadness".to_string());
        let r = evaluate_llm(&client, &c, &simple_template(), &LlmEvalOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_log(&r.log, &mut buf).unwrap();
        let back: Vec<GenerationRecord> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(back, r.log);
        assert_eq!(back[0].prompt_sha256.len(), 64);
    }

    #[test]
    fn prompt_hash_known_value() {
        assert_eq!(
            prompt_hash("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    proptest! {
        #[test]
        fn parse_label_is_total(s in "\\PC{0,60}") {
            let _ = parse_label(&s, LabelSpace::All);
        }

        #[test]
        fn parse_label_finds_earliest(prefix in "[ .,xyz]{0,10}", a in 0usize..7, b in 0usize..7, mid in "[ .,xyz]{1,10}") {
            let (la, lb) = (EmotionLabel::ALL[a], EmotionLabel::ALL[b]);
            let text = format!("{prefix}{}{mid}{}", la.name().to_uppercase(), lb.name());
            prop_assert_eq!(parse_label(&text, LabelSpace::All), ClassLabel::from(la));
        }
    }
}
