use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use erc_core::checkpoint::Checkpoint;
use erc_core::config::{ModelKind, RunConfig};
use erc_core::corpus::{combined_stats, corpus_stats, load_split, Corpus, LabelSpace, Split};
use erc_core::embedding::{SentenceEmbeddingStore, WordEmbeddingTable};
use erc_core::llm::{evaluate_llm, write_log, GenerationClient, HttpClient, LlmEvalOptions, PromptTemplate, ReplayClient};
use erc_core::metrics::{aggregate_runs, MetricsReport};
use erc_core::trainer::{
    evaluate, evaluate_isolated, predict, sample_corpus_triplets, train_contextual_with, train_isolated,
    EvalOptions,
};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use crate::{CommonArgs, EvalArgs, LlmArgs, TrainArgs};

/// Bad flags or configuration; reported with exit status 2.
#[derive(Debug)]
pub struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(command: crate::Command) -> Result<()> {
    use crate::Command::*;
    match command {
        Stats { common } => stats(&common),
        Pretrain { common, train } => pretrain(&common, &train),
        Train {
            common,
            train: t,
            eval,
            classifier,
            runs,
        } => train(&common, &t, &eval, classifier.as_deref(), runs),
        Eval { common, eval: e, model } => eval(&common, &e, &model),
        Predict { common, split, model } => predict_cmd(&common, split, &model),
        SampleTriplets {
            common,
            split,
            count,
            unbalanced,
        } => sample_triplets_cmd(&common, split, count, !unbalanced),
        LlmEval { common, eval, llm } => llm_eval(&common, &eval, &llm),
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?,
        None => RunConfig::default(),
    };
    if let Some(d) = &common.data {
        cfg.data.dir = d.clone();
    }
    if let Some(e) = &common.embeddings {
        cfg.data.embeddings = e.clone();
    }
    if let Some(o) = &common.out {
        cfg.output.dir = o.clone();
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn apply_train(cfg: &mut RunConfig, a: &TrainArgs) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(v) = a.model_kind {
        cfg.model = v;
    }
    if let Some(v) = &a.word_embeddings {
        cfg.data.word_embeddings = Some(v.clone());
    }
    macro_rules! set {
        ($($field:ident => $target:expr),* $(,)?) => {
            $(if let Some(v) = a.$field { $target = v; })*
        };
    }
    set! {
        epochs => t.epochs,
        pretrain_epochs => t.pretrain_epochs,
        learning_rate => t.learning_rate,
        loss_mode => t.loss_mode,
        sampling => t.sampling_strategy,
        distance => t.distance,
        margin => t.margin,
        lambda => t.lambda,
        subnetwork => t.subnetwork,
    }
    if a.max_steps.is_some() {
        t.max_steps = a.max_steps;
    }
    if let Some(k) = a.label_space {
        t.label_space = LabelSpace::from_size(k).ok_or_else(|| usage(format!("--label-space must be 6 or 7, got {k}")))?;
    }
    Ok(())
}

fn apply_eval(cfg: &mut RunConfig, a: &EvalArgs) {
    if let Some(s) = a.split {
        cfg.eval.split = s;
    }
    if a.include_neutral {
        cfg.eval.include_neutral = true;
    }
    if let Some(p) = a.neutral_policy {
        cfg.eval.neutral_policy = p;
    }
}

fn validated(cfg: RunConfig) -> Result<RunConfig> {
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn output_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.output.dir.as_path();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load(cfg: &RunConfig, split: Split) -> Result<Corpus> {
    load_split(&cfg.data.dir, split).with_context(|| format!("loading the {split} split from {}", cfg.data.dir.display()))
}

fn sentence_store(cfg: &RunConfig, corpora: &[&Corpus]) -> Result<SentenceEmbeddingStore> {
    cfg.data
        .embeddings
        .resolve(corpora.iter().copied())
        .context("loading sentence embeddings")
}

fn word_table(cfg: &RunConfig) -> Result<WordEmbeddingTable> {
    let path = cfg
        .data
        .word_embeddings
        .as_ref()
        .ok_or_else(|| usage("the isolated model needs --word-embeddings or data.word_embeddings"))?;
    WordEmbeddingTable::load(path, cfg.data.oov).with_context(|| format!("loading {}", path.display()))
}

fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        neutral_policy: cfg.eval.neutral_policy,
        include_neutral: cfg.eval.include_neutral,
    }
}

/// Replaces the report's echo with the full run configuration.
fn stamp(mut report: MetricsReport, cfg: &RunConfig) -> MetricsReport {
    report.seed = Some(cfg.train.seed);
    report.config_echo = cfg.echo();
    report
}

fn stats(common: &CommonArgs) -> Result<()> {
    let cfg = validated(load_config(common)?)?;
    let mut corpora = Vec::new();
    for split in Split::ALL {
        match load_split(&cfg.data.dir, split) {
            Ok(c) => corpora.push(c),
            Err(erc_core::corpus::CorpusError::MissingFile(p)) => info!("skipping {split}: {} not found", p.display()),
            Err(e) => return Err(e).with_context(|| format!("loading the {split} split")),
        }
    }
    if corpora.is_empty() {
        bail!("no DailyDialog split found in {}", cfg.data.dir.display());
    }
    let all = combined_stats(&corpora)?;
    let mut text = String::new();
    let mut per_split = serde_json::Map::new();
    for (name, s) in std::iter::once(("all".to_string(), all.clone())).chain(
        corpora
            .iter()
            .map(|c| corpus_stats(c).map(|s| (c.split.to_string(), s)))
            .collect::<Result<Vec<_>, _>>()?,
    ) {
        text.push_str(&format!("[{name}]\n"));
        text.push_str(&s.to_report().replace("[label_histogram]", &format!("[{name}.label_histogram]")));
        text.push('\n');
        per_split.insert(name, serde_json::to_value(&s)?);
    }
    print!("{text}");
    let out = output_dir(&cfg)?;
    fs::write(out.join("stats.txt"), &text)?;
    write_json(
        &out.join("stats.json"),
        &json!({"seed": cfg.train.seed, "config_echo": cfg.echo(), "stats": per_split}),
    )
}

fn pretrain(common: &CommonArgs, args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(common)?;
    apply_train(&mut cfg, args)?;
    let cfg = validated(cfg)?;
    let train = load(&cfg, Split::Train)?;
    let store = sentence_store(&cfg, &[&train])?;
    let params = erc_core::classifier::pretrain_classifier(&train, &store, &cfg.train)?;
    let path = output_dir(&cfg)?.join("classifier.json");
    Checkpoint::from_classifier(&params, &cfg.train, store.provider(), cfg.echo()).save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct History<'a, T: Serialize> {
    seed: u64,
    config_echo: serde_json::Value,
    steps: &'a [T],
}

/// Trains one model with `cfg`, writing `model.json` and `history.json`
/// into `dir`. Returns the checkpoint.
fn train_once(cfg: &RunConfig, train: &Corpus, classifier: Option<&Checkpoint>, dir: &Path) -> Result<Checkpoint> {
    fs::create_dir_all(dir)?;
    let ckpt = match cfg.model {
        ModelKind::Contextual => {
            let store = sentence_store(cfg, &[train])?;
            let pretrained = classifier.map(Checkpoint::to_classifier).transpose()?;
            let (model, history) = train_contextual_with(train, &store, &cfg.train, pretrained, &mut |r| info!("{r}"))?;
            write_json(
                &dir.join("history.json"),
                &History {
                    seed: cfg.train.seed,
                    config_echo: cfg.echo(),
                    steps: &history,
                },
            )?;
            Checkpoint::from_contextual(&model, cfg.echo())
        }
        ModelKind::Isolated => {
            let table = word_table(cfg)?;
            let (model, losses) = train_isolated(train, &table, &cfg.train)?;
            write_json(
                &dir.join("history.json"),
                &History {
                    seed: cfg.train.seed,
                    config_echo: cfg.echo(),
                    steps: &losses,
                },
            )?;
            Checkpoint::from_isolated(&model, cfg.echo())
        }
    };
    ckpt.save(&dir.join("model.json"))?;
    Ok(ckpt)
}

fn evaluate_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint, corpus: &Corpus) -> Result<MetricsReport> {
    let opts = eval_options(cfg);
    let report = match ckpt.kind() {
        "contextual" => {
            let model = ckpt.to_contextual()?;
            let store = sentence_store(cfg, &[corpus])?;
            check_store(&store, model.dim(), &model.provider)?;
            evaluate(&model, corpus, &store, &opts)?
        }
        "isolated" => evaluate_isolated(&ckpt.to_isolated()?, corpus, &word_table(cfg)?, &opts)?,
        other => return Err(usage(format!("cannot evaluate a {other} checkpoint; train a contextual model from it"))),
    };
    Ok(report)
}

fn check_store(store: &SentenceEmbeddingStore, dim: usize, provider: &str) -> Result<()> {
    if store.dim() != dim {
        bail!("embedding store has dimension {}, the model expects {dim}", store.dim());
    }
    if store.provider() != provider {
        warn!("model was trained on `{provider}` embeddings, evaluating with `{}`", store.provider());
    }
    Ok(())
}

fn train(
    common: &CommonArgs,
    args: &TrainArgs,
    eval_args: &EvalArgs,
    classifier: Option<&Path>,
    runs: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    apply_train(&mut cfg, args)?;
    apply_eval(&mut cfg, eval_args);
    if let Some(n) = runs {
        cfg.eval.n_runs = n;
    }
    let cfg = validated(cfg)?;
    let classifier = classifier
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let train_split = load(&cfg, Split::Train)?;
    let out = output_dir(&cfg)?.to_path_buf();

    if cfg.eval.n_runs == 1 {
        train_once(&cfg, &train_split, classifier.as_ref(), &out)?;
        println!("wrote {}", out.join("model.json").display());
        return Ok(());
    }

    let test = load(&cfg, cfg.eval.split)?;
    let mut reports = Vec::new();
    for i in 0..cfg.eval.n_runs as u64 {
        let mut run_cfg = cfg.clone();
        run_cfg.train.seed = cfg.train.seed + i;
        let dir = out.join("runs").join(format!("seed-{}", run_cfg.train.seed));
        let ckpt = train_once(&run_cfg, &train_split, classifier.as_ref(), &dir)?;
        let report = stamp(evaluate_checkpoint(&run_cfg, &ckpt, &test)?, &run_cfg);
        println!("seed {}: {}", run_cfg.train.seed, report.summary_line());
        write_json(&dir.join("metrics.json"), &report)?;
        reports.push(report);
    }
    let summary = aggregate_runs(&reports)?;
    println!(
        "mean over {} runs: macroF1*={:.2}±{:.2} microF1*={:.2}±{:.2} MCC={:.2}±{:.2}",
        summary.n_runs,
        100.0 * summary.macro_f1_star.mean,
        100.0 * summary.macro_f1_star.std,
        100.0 * summary.micro_f1_star.mean,
        100.0 * summary.micro_f1_star.std,
        summary.mcc.mean,
        summary.mcc.std,
    );
    write_json(
        &out.join("summary.json"),
        &json!({"seed": cfg.train.seed, "config_echo": cfg.echo(), "summary": summary}),
    )
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

/// The run configuration with the checkpoint's training section and seed.
fn model_config(mut cfg: RunConfig, ckpt: &Checkpoint) -> RunConfig {
    cfg.train = ckpt.config.clone();
    if ckpt.kind() == "isolated" {
        cfg.model = ModelKind::Isolated;
    }
    cfg
}

fn eval(common: &CommonArgs, args: &EvalArgs, model: &Path) -> Result<()> {
    let mut cfg = load_config(common)?;
    apply_eval(&mut cfg, args);
    let cfg = validated(cfg)?;
    let ckpt = load_model(model)?;
    let cfg = model_config(cfg, &ckpt);
    let corpus = load(&cfg, cfg.eval.split)?;
    let report = stamp(evaluate_checkpoint(&cfg, &ckpt, &corpus)?, &cfg);
    let path = output_dir(&cfg)?.join("metrics.json");
    write_json(&path, &report)?;
    println!("{}", report.summary_line());
    if report.include_neutral {
        println!("note: neutral is included; these scores are not comparable with neutral-excluded F1*");
    }
    Ok(())
}

#[derive(Serialize)]
struct Prediction {
    key: String,
    gold: &'static str,
    predicted: &'static str,
}

fn predict_cmd(common: &CommonArgs, split: Option<Split>, model: &Path) -> Result<()> {
    let mut cfg = validated(load_config(common)?)?;
    if let Some(s) = split {
        cfg.eval.split = s;
    }
    let ckpt = load_model(model)?;
    let cfg = model_config(cfg, &ckpt);
    let corpus = load(&cfg, cfg.eval.split)?;
    let mut predictions = Vec::new();
    match ckpt.kind() {
        "contextual" => {
            let model = ckpt.to_contextual()?;
            let store = sentence_store(&cfg, &[&corpus])?;
            check_store(&store, model.dim(), &model.provider)?;
            for d in &corpus.dialogs {
                for (u, p) in d.utterances.iter().zip(predict(&model, d, &store)?) {
                    predictions.push(Prediction {
                        key: erc_core::embedding::utterance_key(&d.id, u.index),
                        gold: u.label.name(),
                        predicted: p.name(),
                    });
                }
            }
        }
        "isolated" => {
            let model = ckpt.to_isolated()?;
            let table = word_table(&cfg)?;
            for d in &corpus.dialogs {
                for u in &d.utterances {
                    predictions.push(Prediction {
                        key: erc_core::embedding::utterance_key(&d.id, u.index),
                        gold: u.label.name(),
                        predicted: model.predict(u, &table)?.name(),
                    });
                }
            }
        }
        other => return Err(usage(format!("cannot predict with a {other} checkpoint"))),
    }
    let path = output_dir(&cfg)?.join("predictions.json");
    write_json(
        &path,
        &json!({
            "seed": cfg.train.seed,
            "config_echo": cfg.echo(),
            "split": cfg.eval.split,
            "predictions": predictions,
        }),
    )?;
    println!("wrote {} predictions to {}", predictions.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct TripletLine {
    a: String,
    p: String,
    n: String,
}

fn sample_triplets_cmd(common: &CommonArgs, split: Option<Split>, count: usize, balanced: bool) -> Result<()> {
    let cfg = validated(load_config(common)?)?;
    let split = split.unwrap_or(Split::Train);
    let corpus = load(&cfg, split)?;
    let triplets = sample_corpus_triplets(&corpus, cfg.train.label_space, count, balanced, cfg.train.seed)?;
    let out = output_dir(&cfg)?;
    let mut lines = String::new();
    for t in &triplets {
        let line = TripletLine {
            a: t.anchor.to_string(),
            p: t.positive.to_string(),
            n: t.negative.to_string(),
        };
        lines.push_str(&serde_json::to_string(&line)?);
        lines.push('\n');
    }
    std::io::stdout().write_all(lines.as_bytes())?;
    fs::write(out.join("triplets.jsonl"), &lines)?;
    write_json(
        &out.join("triplets.meta.json"),
        &json!({
            "seed": cfg.train.seed,
            "config_echo": cfg.echo(),
            "split": split,
            "count": count,
            "balanced": balanced,
        }),
    )
}

fn llm_eval(common: &CommonArgs, eval_args: &EvalArgs, args: &LlmArgs) -> Result<()> {
    let mut cfg = load_config(common)?;
    apply_eval(&mut cfg, eval_args);
    let llm = &mut cfg.llm;
    if let Some(t) = &args.template {
        llm.template = t.clone();
    }
    if let Some(r) = &args.replay {
        llm.replay = Some(r.clone());
    }
    if let Some(e) = &args.endpoint {
        llm.client.endpoint = e.clone();
        llm.replay = None;
    }
    if let Some(p) = args.parallelism {
        llm.parallelism = p;
    }
    if let Some(u) = args.unparsable {
        llm.unparsable = u;
    }
    if let Some(v) = args.max_new_tokens {
        llm.client.max_new_tokens = v;
    }
    if let Some(v) = args.timeout_secs {
        llm.client.timeout_secs = v;
    }
    if let Some(v) = args.max_retries {
        llm.client.max_retries = v;
    }
    let cfg = validated(cfg)?;
    let template = PromptTemplate::resolve(&cfg.llm.template).map_err(|e| usage(format!("template: {e}")))?;
    let corpus = load(&cfg, cfg.eval.split)?;
    let client: Box<dyn GenerationClient> = match &cfg.llm.replay {
        Some(path) => Box::new(ReplayClient::load(path).with_context(|| format!("loading {}", path.display()))?),
        None => Box::new(HttpClient::new(cfg.llm.client.clone())?),
    };
    let opts = LlmEvalOptions {
        unparsable: cfg.llm.unparsable,
        parallelism: cfg.llm.parallelism,
        collapse_threshold: cfg.llm.collapse_threshold,
        neutral_policy: cfg.eval.neutral_policy,
        include_neutral: cfg.eval.include_neutral,
        seed: Some(cfg.train.seed),
        config_echo: cfg.echo(),
    };
    let result = evaluate_llm(client.as_ref(), &corpus, &template, &opts)?;
    let out = output_dir(&cfg)?;
    write_json(&out.join("llm_report.json"), &result)?;
    let mut log = Vec::new();
    write_log(&result.log, &mut log)?;
    fs::write(out.join("generation_log.jsonl"), log)?;
    println!("{}", result.metrics.summary_line());
    println!(
        "requested={} failed={} unparsable={} modal={} ({:.1}%){}",
        result.n_requested,
        result.n_failed,
        result.n_unparsable,
        result.modal.label.as_deref().unwrap_or("-"),
        100.0 * result.modal.share,
        if result.modal.collapsed { " COLLAPSED" } else { "" }
    );
    Ok(())
}
